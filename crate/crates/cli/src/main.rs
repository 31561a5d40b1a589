//! `panofield`: train, render and evaluate satellite-conditioned panorama
//! fields.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use panofield::config::Config;
use panofield::dataset::{load_dataset, SceneSample};
use panofield::illumination::{extract_illumination, IlluminationFeature, SkyMask};
use panofield::imaging::{load_gray, load_rgb, save_png, Image};
use panofield::io::{read_tensor_file, write_tensor_file};
use panofield::metrics::{dino_similarity, psnr, ssim};
use panofield::objectives::{PerceptualDistance, RandomConvPerceptual};
use panofield::synthetic::write_synthetic_dataset;
use panofield::training::{
    fit, load_checkpoint, load_checkpoint_with, prepare_dataset, resume, satellite_input, street_camera, StyleSource,
    TrainState,
};
use panofield::{no_grad, Tensor};

#[derive(Parser)]
#[command(name = "panofield", version, about = "Satellite-conditioned street panorama synthesis")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the dataset named in the config (or --dataset).
    Train {
        config: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Output directory for the log, previews and checkpoint.
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Continue from this checkpoint up to the configured iteration count.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Render one street-view panorama.
    RenderPano {
        checkpoint: PathBuf,
        config: PathBuf,
        /// Camera offset in meters, `east,north`.
        #[arg(long, allow_hyphen_values = true, value_parser = parse_position)]
        position: (f64, f64),
        #[arg(long, allow_hyphen_values = true, default_value_t = 0.0)]
        heading: f64,
        #[command(flatten)]
        style: StyleArgs,
        #[command(flatten)]
        sat: SatArg,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Render one panorama per trajectory row into frame_NNNNN.png.
    RenderVideo {
        checkpoint: PathBuf,
        /// CSV with header `east_m,north_m,heading_rad`.
        trajectory: PathBuf,
        #[command(flatten)]
        style: StyleArgs,
        #[command(flatten)]
        sat: SatArg,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Render the scene from above with the null style.
    RenderSat {
        checkpoint: PathBuf,
        #[command(flatten)]
        sat: SatArg,
        /// Render at sat_size / factor.
        #[arg(long, default_value_t = 1)]
        factor: usize,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write the 270-bin sky histogram of a panorama.
    ExtractIllumination {
        panorama: PathBuf,
        mask: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Write the synthetic box-scene dataset described by a config.
    MakeSynthetic {
        config: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Score panoramas against a dataset and write a per-sample report.
    ///
    /// SOURCE is either a checkpoint directory, whose renders are scored, or
    /// a directory of predicted panoramas named like the dataset's street
    /// images.
    Eval {
        source: PathBuf,
        dataset: PathBuf,
        /// Directory of DINO token files `<street stem>.pred.ptns` and
        /// `<street stem>.gt.ptns`.
        #[arg(long)]
        tokens: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
}

#[derive(clap::Args)]
struct StyleArgs {
    /// Illumination: a feature file, `random` (from the training pool) or
    /// `null`.
    #[arg(long, default_value = "random")]
    illum: String,
    /// Seed for `--illum random`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args)]
struct SatArg {
    /// Satellite image; defaults to the first sample of the config's dataset.
    #[arg(long)]
    sat: Option<PathBuf>,
}

fn parse_position(s: &str) -> std::result::Result<(f64, f64), String> {
    let (e, n) = s.split_once(',').ok_or_else(|| format!("expected `east,north`, got `{s}`"))?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(e)?, parse(n)?))
}

fn style_source(args: &StyleArgs) -> Result<StyleSource> {
    Ok(match args.illum.as_str() {
        "random" => StyleSource::Random(args.seed),
        "null" => StyleSource::Null,
        path => {
            let file = read_tensor_file(path).with_context(|| format!("reading illumination file {path}"))?;
            StyleSource::Feature(IlluminationFeature::from_file(&file)?)
        }
    })
}

fn satellite(state: &TrainState, arg: &SatArg) -> Result<Tensor> {
    let path = match &arg.sat {
        Some(p) => p.clone(),
        None => {
            let root = state.config.paths.dataset.as_ref().context("no --sat given and the config names no dataset")?;
            let samples = load_dataset(root)?;
            samples.first().context("dataset is empty")?.sat.clone()
        }
    };
    let img = load_rgb(&path).with_context(|| format!("loading satellite image {}", path.display()))?;
    Ok(satellite_input(&img, &state.config)?)
}

fn render_to(state: &TrainState, sat: &Tensor, east: f64, north: f64, heading: f64, style: &StyleSource, out: &Path) -> Result<()> {
    let cam = street_camera(&state.config, east, north, heading)?;
    let w = state.style_for(style)?;
    let render = state.render_panorama(sat, &cam, &w)?;
    save_png(&Image::from_tensor(&render.hi_res)?.clamped(), out)?;
    Ok(())
}

fn train(config_path: &Path, dataset: Option<PathBuf>, output: Option<PathBuf>, resume_from: Option<PathBuf>) -> Result<()> {
    let config = Config::load(config_path)?;
    let root = dataset.or_else(|| config.paths.dataset.clone()).context("no dataset: pass --dataset or set paths.dataset")?;
    let out = output.or_else(|| config.paths.output.clone()).context("no output: pass -o or set paths.output")?;
    let samples = load_dataset(&root)?;
    let data = prepare_dataset(&samples, &config)?;
    info!("training on {} samples from {}", data.len(), root.display());
    let (state, logs) = match resume_from {
        Some(ck) => resume(load_checkpoint_with(&ck, config)?, &data, Some(&out))?,
        None => fit(config, &data, Some(&out))?,
    };
    if let Some(last) = logs.last() {
        info!("finished at iteration {} with total loss {:.5}", state.iteration, last.total);
    }
    Ok(())
}

fn render_video(checkpoint: &Path, trajectory: &Path, style: &StyleArgs, sat: &SatArg, out: &Path) -> Result<()> {
    #[derive(serde::Deserialize)]
    struct Row {
        east_m: f64,
        north_m: f64,
        heading_rad: f64,
    }
    let state = load_checkpoint(checkpoint)?;
    let sat = satellite(&state, sat)?;
    let style = style_source(style)?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(trajectory)?;
    if reader.headers()?.iter().collect::<Vec<_>>() != ["east_m", "north_m", "heading_rad"] {
        bail!("{}: expected header east_m,north_m,heading_rad", trajectory.display());
    }
    fs::create_dir_all(out)?;
    for (i, row) in reader.deserialize::<Row>().enumerate() {
        let row = row.with_context(|| format!("{}: line {}", trajectory.display(), i + 2))?;
        render_to(&state, &sat, row.east_m, row.north_m, row.heading_rad, &style, &out.join(format!("frame_{i:05}.png")))?;
    }
    Ok(())
}

fn extract(panorama: &Path, mask: &Path, out: &Path) -> Result<()> {
    let pano = load_rgb(panorama)?;
    let (mask, _) = SkyMask::from_gray(&load_gray(mask)?)?;
    let f = extract_illumination(&pano, &mask)?;
    write_tensor_file(out, &f.to_file())?;
    Ok(())
}

/// One report row; `None` metrics are written as empty cells.
struct Scores {
    name: String,
    psnr: f64,
    ssim: f64,
    perc: f64,
    dino: Option<f64>,
}

fn fmt_metric(v: f64) -> String {
    if v.is_infinite() && v > 0.0 {
        "inf".into()
    } else {
        format!("{v:.6}")
    }
}

fn score(name: String, pred: &Image, gt: &Image, perceptual: &dyn PerceptualDistance, dino: Option<f64>) -> Result<Scores> {
    let gt = gt.fit_to(pred.height, pred.width)?;
    let (a, b) = (pred.to_tensor(), gt.to_tensor());
    let shape = [1, 3, pred.height, pred.width];
    let perc = no_grad(|| perceptual.distance(&a.reshape(&shape), &b.reshape(&shape)).item());
    Ok(Scores { name, psnr: psnr(pred, &gt)?, ssim: ssim(pred, &gt)?, perc, dino })
}

fn dino_for(tokens: Option<&Path>, sample: &SceneSample) -> Result<Option<f64>> {
    let Some(dir) = tokens else { return Ok(None) };
    let stem = sample.street.file_stem().context("street image has no file name")?.to_string_lossy().into_owned();
    let read = |kind: &str| -> Result<Tensor> {
        let path = dir.join(format!("{stem}.{kind}.ptns"));
        Ok(read_tensor_file(&path).with_context(|| format!("reading {}", path.display()))?.to_tensor())
    };
    Ok(Some(dino_similarity(&read("pred")?, &read("gt")?)?))
}

fn eval(source: &Path, dataset: &Path, tokens: Option<&Path>, out: &Path) -> Result<()> {
    let samples = load_dataset(dataset)?;
    let perceptual = RandomConvPerceptual::default();
    let state = if source.join("manifest.json").is_file() { Some(load_checkpoint(source)?) } else { None };
    let mut rows = Vec::with_capacity(samples.len());
    for sample in &samples {
        let name = sample.street.file_name().context("street image has no file name")?.to_string_lossy().into_owned();
        let loaded = sample.load()?;
        let pred = match &state {
            Some(state) => {
                let sat = satellite_input(&loaded.sat, &state.config)?;
                let cam = street_camera(&state.config, sample.east_m, sample.north_m, sample.heading_rad)?;
                let feature = extract_illumination(&loaded.street, &loaded.mask)?;
                let w = state.style_for(&StyleSource::Feature(feature))?;
                Image::from_tensor(&state.render_panorama(&sat, &cam, &w)?.hi_res)?.clamped()
            }
            None => load_rgb(source.join(&name)).with_context(|| format!("prediction for {name}"))?,
        };
        rows.push(score(name, &pred, &loaded.street, &perceptual, dino_for(tokens, sample)?)?);
    }
    write_report(out, &rows)
}

fn write_report(out: &Path, rows: &[Scores]) -> Result<()> {
    let mut w = csv::Writer::from_path(out)?;
    w.write_record(["sample", "psnr", "ssim", "perc", "dino"])?;
    for r in rows {
        let dino = r.dino.map(fmt_metric).unwrap_or_default();
        w.write_record([r.name.clone(), fmt_metric(r.psnr), fmt_metric(r.ssim), fmt_metric(r.perc), dino])?;
    }
    let mean = |f: &dyn Fn(&Scores) -> Option<f64>| {
        let vals: Vec<f64> = rows.iter().filter_map(f).collect();
        if vals.is_empty() {
            String::new()
        } else {
            fmt_metric(vals.iter().sum::<f64>() / vals.len() as f64)
        }
    };
    w.write_record([
        "mean".to_string(),
        mean(&|r| Some(r.psnr)),
        mean(&|r| Some(r.ssim)),
        mean(&|r| Some(r.perc)),
        mean(&|r| r.dino),
    ])?;
    w.flush()?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train { config, dataset, output, resume } => train(&config, dataset, output, resume),
        Command::RenderPano { checkpoint, config, position, heading, style, sat, output } => {
            let state = load_checkpoint_with(&checkpoint, Config::load(&config)?)?;
            let sat = satellite(&state, &sat)?;
            render_to(&state, &sat, position.0, position.1, heading, &style_source(&style)?, &output)
        }
        Command::RenderVideo { checkpoint, trajectory, style, sat, output } => {
            render_video(&checkpoint, &trajectory, &style, &sat, &output)
        }
        Command::RenderSat { checkpoint, sat, factor, output } => {
            let state = load_checkpoint(&checkpoint)?;
            let sat = satellite(&state, &sat)?;
            let render = state.render_satellite_at(&sat, factor)?;
            save_png(&Image::from_tensor(&render.raw_color())?.clamped(), &output)?;
            Ok(())
        }
        Command::ExtractIllumination { panorama, mask, output } => extract(&panorama, &mask, &output),
        Command::MakeSynthetic { config, output } => {
            let config = Config::load(&config)?;
            let samples = write_synthetic_dataset(&config.synthetic, config.synthetic_layout(), &output)?;
            info!("wrote {} samples to {}", samples.len(), output.display());
            Ok(())
        }
        Command::Eval { source, dataset, tokens, output } => eval(&source, &dataset, tokens.as_deref(), &output),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
