//! Model assembly, the alternating generator/discriminator step, fitting and
//! checkpoints.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::dataset::{LoadedSample, SceneSample};
use crate::decoder::FieldDecoder;
use crate::error::{invalid, shape_err, Error, Result};
use crate::geometry::{CropWindow, PanoramaCamera, SatelliteOrthoCamera};
use crate::illumination::{
    draw_illumination, extract_illumination, map_illumination_as, null_style_of, IlluminationFeature, IlluminationMapper,
    IlluminationPolicy, Provenance, SkyMask, StyleVector, ILLUMINATION_DIM,
};
use crate::imaging::{save_png, Image};
use crate::io::{read_tensor_file, write_tensor_file, TensorData, TensorFile};
use crate::nn::{avg_pool, impl_params, upsample2x, Params};
use crate::objectives::{
    gan_losses, generator_gan_loss, opacity_loss, reconstruction_loss, sky_loss, total_loss, Discriminator, LossParts,
    PerceptualDistance, RandomConvPerceptual,
};
use crate::optim::{clip_grad_norm, Adam, AdamConfig};
use crate::render::{render_satellite, render_street, RenderOutput, SkyGenerator, StreetRender, SuperResolver};
use crate::tensor::{grad, no_grad, Tensor};
use crate::triplane::{generate_triplane, TriPlane, TriPlaneNet};

/// Every generator-side network.
#[derive(Debug, Clone)]
pub struct Generator {
    pub triplane: TriPlaneNet,
    pub mapper: IlluminationMapper,
    pub decoder: FieldDecoder,
    pub sky: Option<SkyGenerator>,
    pub sr: SuperResolver,
}
impl_params!(Generator { triplane, mapper, decoder, sky, sr });

impl Generator {
    pub fn new(rng: &mut impl Rng, config: &Config) -> Result<Self> {
        let m = &config.model;
        let triplane = TriPlaneNet::new(rng, config.triplane_spec())?;
        let mapper = IlluminationMapper::with_dims(rng, ILLUMINATION_DIM, m.mapper_hidden, m.style_dim);
        let decoder = FieldDecoder::new(rng, m.decoder_variant, 3 * m.plane_channels, m.decoder_hidden, m.style_dim);
        let sky = if config.train.sky_branch { Some(SkyGenerator::new(rng, config.sky_spec())?) } else { None };
        let sr = SuperResolver::new(rng, m.sr_hidden);
        Ok(Generator { triplane, mapper, decoder, sky, sr })
    }
}

/// Street (6-channel) and satellite (3-channel) discriminators.
#[derive(Debug, Clone)]
pub struct Discriminators {
    pub street: Discriminator,
    pub sat: Discriminator,
}
impl_params!(Discriminators { street, sat });

impl Discriminators {
    pub fn new(rng: &mut impl Rng, config: &Config) -> Self {
        let w = &config.model.disc_widths;
        Discriminators { street: Discriminator::new(rng, 6, w), sat: Discriminator::new(rng, 3, w) }
    }
}

/// One training pair resampled to the configured resolutions.
#[derive(Debug, Clone)]
pub struct TrainingSample {
    /// `[3, S, S]`.
    pub sat: Tensor,
    /// `[1, 3, S / sat_factor, S / sat_factor]`.
    pub sat_low: Tensor,
    /// `[1, 3, 2H, 2W]`.
    pub street_hi: Tensor,
    /// `[1, 3, H, W]`.
    pub street_low: Tensor,
    /// Sky mask at the render resolution.
    pub mask: SkyMask,
    pub illumination: IlluminationFeature,
    pub camera: PanoramaCamera,
}

/// Street camera of a sample at the render resolution.
pub fn street_camera(config: &Config, east: f64, north: f64, heading: f64) -> Result<PanoramaCamera> {
    let mut cam = PanoramaCamera::new(config.scene.street_position(east, north), heading, config.render.width, config.render.height)?;
    cam.mapping = config.render.elevation_mapping;
    Ok(cam)
}

/// Satellite image resampled to the network input, `[3, S, S]`.
pub fn satellite_input(sat: &Image, config: &Config) -> Result<Tensor> {
    let s = config.model.sat_size;
    Ok(sat.fit_to(s, s)?.to_tensor())
}

pub fn prepare_sample(loaded: &LoadedSample, sample: &SceneSample, config: &Config) -> Result<TrainingSample> {
    let (h, w, s) = (config.render.height, config.render.width, config.model.sat_size);
    let street = &loaded.street;
    if street.height % (2 * h) != 0 || street.width != 4 * street.height {
        return Err(shape_err(format!(
            "street image {}x{} must be a 1:4 panorama at a multiple of {}x{}",
            street.height,
            street.width,
            2 * h,
            2 * w
        )));
    }
    let illumination = extract_illumination(street, &loaded.mask)?;
    let street_hi = street.fit_to(2 * h, 2 * w)?;
    let street_low = street_hi.downsample(2)?;
    let mask = loaded.mask.downsample(street.height / h)?;
    let sat_t = satellite_input(&loaded.sat, config)?;
    let sat_low = avg_pool(&sat_t.reshape(&[1, 3, s, s]), config.render.sat_factor);
    let batch = |img: &Image| img.to_tensor().reshape(&[1, 3, img.height, img.width]);
    Ok(TrainingSample {
        sat: sat_t,
        sat_low,
        street_hi: batch(&street_hi),
        street_low: batch(&street_low),
        mask,
        illumination,
        camera: street_camera(config, sample.east_m, sample.north_m, sample.heading_rad)?,
    })
}

/// Loads and prepares every sample of a dataset.
pub fn prepare_dataset(samples: &[SceneSample], config: &Config) -> Result<Vec<TrainingSample>> {
    samples.iter().map(|s| prepare_sample(&s.load()?, s, config)).collect()
}

/// Logged values of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepLog {
    pub iteration: u64,
    pub total: f64,
    /// `(name, unweighted, weighted)`.
    pub terms: Vec<(&'static str, f64, f64)>,
    pub d_loss: f64,
    pub r1: f64,
    /// Generator gradient norm before clipping.
    pub grad_norm: f64,
}

impl StepLog {
    pub fn term(&self, name: &str) -> f64 {
        self.terms.iter().find(|t| t.0 == name).map(|t| t.1).unwrap_or(0.0)
    }

    pub const CSV_HEADER: &'static str = "iteration,total,sat,str,sky,opa,d_str,d_sat,d_loss,r1,grad_norm";

    pub fn csv_row(&self) -> String {
        let mut row = format!("{},{}", self.iteration, self.total);
        for name in ["sat", "str", "sky", "opa", "d_str", "d_sat"] {
            row.push_str(&format!(",{}", self.term(name)));
        }
        row.push_str(&format!(",{},{},{}", self.d_loss, self.r1, self.grad_norm));
        row
    }
}

/// Per-step random stream, a pure function of the seed and iteration so
/// resumed runs replay the same draws.
fn step_rng(seed: u64, iteration: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&iteration.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

fn param_refs(p: &dyn Params) -> Vec<Tensor> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.push(t.clone()));
    out
}

/// Parameters, optimizer state and the illumination pool.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: Config,
    pub generator: Generator,
    pub discriminators: Discriminators,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub iteration: u64,
    /// Training illuminations used by the random policy and by
    /// `random` rendering.
    pub pool: Vec<IlluminationFeature>,
}

impl TrainState {
    pub fn new(config: Config, pool: Vec<IlluminationFeature>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let generator = Generator::new(&mut rng, &config)?;
        let discriminators = Discriminators::new(&mut rng, &config);
        let opt_g = Adam::new(AdamConfig { lr: config.train.lr_g, ..AdamConfig::default() }, &generator)
            .with_multiplier("mapper.", config.train.mapper_lr_mult);
        let opt_d = Adam::new(AdamConfig { lr: config.train.lr_d, ..AdamConfig::default() }, &discriminators);
        Ok(TrainState { config, generator, discriminators, opt_g, opt_d, iteration: 0, pool })
    }

    pub fn style_dim(&self) -> usize {
        self.config.model.style_dim
    }

    pub fn map_style(&self, f: &IlluminationFeature, provenance: Provenance) -> StyleVector {
        map_illumination_as(f, &self.generator.mapper, provenance)
    }

    /// Style used for a training sample under the configured policy.
    fn training_style(&self, sample: &TrainingSample, rng: &mut impl Rng) -> Result<StyleVector> {
        Ok(match self.config.train.illumination_policy {
            IlluminationPolicy::Real => self.map_style(&sample.illumination, Provenance::Real),
            IlluminationPolicy::Random => self.map_style(draw_illumination(&self.pool, rng)?, Provenance::RandomSampled),
            IlluminationPolicy::Null => null_style_of(self.style_dim()),
        })
    }

    pub fn triplane(&self, sat: &Tensor) -> Result<TriPlane> {
        generate_triplane(&self.generator.triplane, sat)
    }

    pub fn render_street(&self, planes: &TriPlane, w: &StyleVector, cam: &PanoramaCamera) -> Result<StreetRender> {
        let g = &self.generator;
        render_street(planes, &g.decoder, w, g.sky.as_ref(), &g.sr, cam, &self.config.scene, self.config.street_sampling())
    }

    /// Satellite-view render at the supervision resolution.
    pub fn render_satellite(&self, planes: &TriPlane, crop: Option<CropWindow>) -> Result<RenderOutput> {
        render_satellite(
            planes,
            &self.generator.decoder,
            &self.supervision_camera(),
            &self.config.scene,
            self.config.render.sat_samples,
            crop,
        )
    }

    pub fn supervision_camera(&self) -> SatelliteOrthoCamera {
        self.config.satellite_camera().downscaled(self.config.render.sat_factor)
    }

    /// One generator update followed by one discriminator update.
    pub fn train_step(&mut self, data: &[TrainingSample], perceptual: &dyn PerceptualDistance) -> Result<StepLog> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let tc = self.config.train.clone();
        let mut rng = step_rng(tc.seed, self.iteration);
        let batch: Vec<&TrainingSample> = (0..tc.batch_size).map(|_| &data[rng.random_range(0..data.len())]).collect();
        let inv_b = 1.0 / batch.len() as f64;
        let sat_cam = self.supervision_camera();
        let crop_side = sat_cam.width / 2;

        let mut sums: [Option<Tensor>; 4] = [None, None, None, None];
        let mut accumulate = |slot: usize, t: Tensor| {
            let t = t.mul_scalar(inv_b);
            sums[slot] = Some(match sums[slot].take() {
                Some(s) => s.add(&t),
                None => t,
            });
        };
        let (mut fake_str, mut fake_sat, mut real_str, mut real_sat) = (vec![], vec![], vec![], vec![]);
        for s in &batch {
            let planes = self.triplane(&s.sat)?;
            let w = self.training_style(s, &mut rng)?;
            let street = self.render_street(&planes, &w, &s.camera)?;
            accumulate(0, reconstruction_loss(&street.hi_res, &s.street_hi, perceptual)?);
            if tc.use_opacity_loss {
                accumulate(1, opacity_loss(&street.ground.opacity, &s.mask)?);
            }
            if let (Some(sky), true) = (&street.sky, tc.use_sky_loss) {
                accumulate(2, sky_loss(&sky.narrow(1, 0, 3), &s.street_low, &s.mask)?);
            }
            let row0 = rng.random_range(0..=sat_cam.height - crop_side);
            let col0 = rng.random_range(0..=sat_cam.width - crop_side);
            let win = CropWindow { row0, col0, height: crop_side, width: crop_side };
            let sat_view = self.render_satellite(&planes, Some(win))?.raw_color();
            let sat_gt = s.sat_low.narrow(2, row0, crop_side).narrow(3, col0, crop_side);
            if tc.use_sat_loss {
                accumulate(3, reconstruction_loss(&sat_view, &sat_gt, perceptual)?);
            }
            if tc.use_gan {
                fake_str.push(Tensor::concat(&[street.hi_res.clone(), upsample2x(&street.raw_blend)], 1));
                real_str.push(Tensor::concat(&[s.street_hi.clone(), upsample2x(&s.street_low)], 1));
                fake_sat.push(sat_view);
                real_sat.push(sat_gt);
            }
        }
        let [str_loss, opa, sky, sat] = sums;
        let d = &self.discriminators;
        let mut parts = LossParts { str: str_loss, opa, sky, sat, ..LossParts::default() };
        let fakes = tc.use_gan.then(|| (Tensor::concat(&fake_str, 0), Tensor::concat(&fake_sat, 0)));
        if let Some((fake_str, fake_sat)) = &fakes {
            parts.d_str = Some(generator_gan_loss(&d.street, fake_str)?);
            parts.d_sat = Some(generator_gan_loss(&d.sat, fake_sat)?);
        }
        let breakdown = total_loss(&parts, &tc.weights)?;
        let params = param_refs(&self.generator);
        let refs: Vec<&Tensor> = params.iter().collect();
        let mut grads = grad(&breakdown.total, &refs, false);
        let grad_norm = clip_grad_norm(&mut grads, tc.grad_clip);
        self.opt_g.step(&mut self.generator, &grads)?;

        let (mut d_loss, mut r1) = (0.0, 0.0);
        if let Some((fake_str, fake_sat)) = fakes {
            let real_str = Tensor::concat(&real_str, 0);
            let real_sat = Tensor::concat(&real_sat, 0);
            let ls = gan_losses(&d.street, &real_str, &fake_str.detach(), tc.r1_gamma)?;
            let lt = gan_losses(&d.sat, &real_sat, &fake_sat.detach(), tc.r1_gamma)?;
            let w = &tc.weights;
            let total = ls.d_loss.add(&ls.r1).mul_scalar(w.d_str).add(&lt.d_loss.add(&lt.r1).mul_scalar(w.d_sat));
            d_loss = w.d_str * ls.d_loss.item() + w.d_sat * lt.d_loss.item();
            r1 = w.d_str * ls.r1.item() + w.d_sat * lt.r1.item();
            if !total.item().is_finite() {
                return Err(Error::NonFinite { term: "discriminator".into() });
            }
            let dparams = param_refs(&self.discriminators);
            let drefs: Vec<&Tensor> = dparams.iter().collect();
            let mut dgrads = grad(&total, &drefs, false);
            clip_grad_norm(&mut dgrads, tc.grad_clip);
            self.opt_d.step(&mut self.discriminators, &dgrads)?;
        }
        let log = StepLog { iteration: self.iteration, total: breakdown.total.item(), terms: breakdown.terms, d_loss, r1, grad_norm };
        self.iteration += 1;
        Ok(log)
    }

    /// Renders a panorama without recording gradients.
    pub fn render_panorama(&self, sat: &Tensor, cam: &PanoramaCamera, w: &StyleVector) -> Result<StreetRender> {
        no_grad(|| {
            let planes = self.triplane(sat)?;
            self.render_street(&planes, w, cam)
        })
    }

    /// Full-frame satellite-view render at the supervision resolution.
    pub fn render_satellite_view(&self, sat: &Tensor) -> Result<RenderOutput> {
        self.render_satellite_at(sat, self.config.render.sat_factor)
    }

    /// Full-frame satellite-view render at `sat_size / factor`.
    pub fn render_satellite_at(&self, sat: &Tensor, factor: usize) -> Result<RenderOutput> {
        if factor == 0 || self.config.model.sat_size % factor != 0 {
            return Err(invalid(format!("satellite size {} is not divisible by {factor}", self.config.model.sat_size)));
        }
        let cam = self.config.satellite_camera().downscaled(factor);
        no_grad(|| {
            let planes = self.triplane(sat)?;
            let r = &self.config.render;
            render_satellite(&planes, &self.generator.decoder, &cam, &self.config.scene, r.sat_samples, None)
        })
    }

    /// Style for rendering: a stored feature, a seeded draw from the
    /// training pool, or the null style.
    pub fn style_for(&self, source: &StyleSource) -> Result<StyleVector> {
        no_grad(|| match source {
            StyleSource::Feature(f) => Ok(self.map_style(f, Provenance::Real)),
            StyleSource::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                Ok(self.map_style(draw_illumination(&self.pool, &mut rng)?, Provenance::RandomSampled))
            }
            StyleSource::Null => Ok(null_style_of(self.style_dim())),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.generator.param_count() + self.discriminators.param_count()
    }
}

/// Where a rendering style comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum StyleSource {
    Feature(IlluminationFeature),
    Random(u64),
    Null,
}

/// Illumination pool of a prepared dataset, in sample order.
pub fn illumination_pool(data: &[TrainingSample]) -> Vec<IlluminationFeature> {
    data.iter().map(|s| s.illumination.clone()).collect()
}

/// Runs `train_step` until the configured iteration count, starting from
/// `state`. With an output directory, the loss log is appended to
/// `train_log.csv` and checkpoints are written to `checkpoint/`.
pub fn resume(mut state: TrainState, data: &[TrainingSample], out: Option<&Path>) -> Result<(TrainState, Vec<StepLog>)> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let perceptual = RandomConvPerceptual::default();
    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join("train_log.csv");
            let fresh = !path.exists();
            let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
            if fresh {
                writeln!(f, "{}", StepLog::CSV_HEADER)?;
            }
            Some(f)
        }
        None => None,
    };
    let mut logs = Vec::new();
    let every = state.config.train.checkpoint_every;
    while state.iteration < state.config.train.iterations {
        let log = state.train_step(data, &perceptual)?;
        if let Some(f) = &mut log_file {
            writeln!(f, "{}", log.csv_row())?;
        }
        if log.iteration % 50 == 0 {
            info!("iteration {} total {:.5} str {:.5}", log.iteration, log.total, log.term("str"));
        }
        logs.push(log);
        if let Some(dir) = out {
            if every > 0 && state.iteration % every == 0 {
                save_checkpoint(&state, dir.join("checkpoint"))?;
                write_preview(&state, &data[0], &dir.join("preview.png"))?;
            }
        }
    }
    if let Some(dir) = out {
        save_checkpoint(&state, dir.join("checkpoint"))?;
        write_preview(&state, &data[0], &dir.join("preview.png"))?;
    }
    Ok((state, logs))
}

/// Trains from scratch.
pub fn fit(config: Config, data: &[TrainingSample], out: Option<&Path>) -> Result<(TrainState, Vec<StepLog>)> {
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let state = TrainState::new(config, illumination_pool(data))?;
    resume(state, data, out)
}

fn write_preview(state: &TrainState, sample: &TrainingSample, path: &Path) -> Result<()> {
    let w = no_grad(|| state.map_style(&sample.illumination, Provenance::Real));
    let out = state.render_panorama(&sample.sat, &sample.camera, &w)?;
    save_png(&Image::from_tensor(&out.hi_res)?, path)
}

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamEntry {
    config: AdamConfig,
    steps: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    format: u32,
    iteration: u64,
    config_hash: String,
    generator: Vec<ParamEntry>,
    discriminators: Vec<ParamEntry>,
    adam_generator: AdamEntry,
    adam_discriminators: AdamEntry,
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_group(dir: &Path, prefix: &str, params: &dyn Params, adam: &Adam) -> Result<Vec<ParamEntry>> {
    let named = params.named_params();
    let mut entries = Vec::with_capacity(named.len());
    for (i, (name, t)) in named.iter().enumerate() {
        let file = format!("{prefix}{i:04}.ptns");
        write_tensor_file(dir.join(&file), &TensorFile::from_tensor(t))?;
        let moments = [(&adam.m[i], "m"), (&adam.v[i], "v")];
        for (values, tag) in moments {
            let f = TensorFile::new(vec![values.len()], TensorData::F64(values.clone()))?;
            write_tensor_file(dir.join(format!("{prefix}{tag}{i:04}.ptns")), &f)?;
        }
        entries.push(ParamEntry { name: name.clone(), shape: t.shape().to_vec(), file });
    }
    Ok(entries)
}

fn read_group(dir: &Path, prefix: &str, entries: &[ParamEntry], params: &mut dyn Params, adam: &mut Adam) -> Result<()> {
    let expected = params.named_params();
    if expected.len() != entries.len() {
        return Err(ckpt_err(format!("{} has {} tensors, model expects {}", prefix, entries.len(), expected.len())));
    }
    let mut loaded = Vec::with_capacity(entries.len());
    for (i, (e, (name, t))) in entries.iter().zip(&expected).enumerate() {
        if &e.name != name || e.shape != t.shape() {
            return Err(ckpt_err(format!("tensor {i}: stored `{}` {:?}, model expects `{name}` {:?}", e.name, e.shape, t.shape())));
        }
        let f = read_tensor_file(dir.join(&e.file))?;
        if f.dims != e.shape {
            return Err(ckpt_err(format!("{}: stored dims {:?} differ from manifest", e.file, f.dims)));
        }
        loaded.push(f.to_f64());
        for (tag, slot) in [("m", &mut adam.m[i]), ("v", &mut adam.v[i])] {
            let f = read_tensor_file(dir.join(format!("{prefix}{tag}{i:04}.ptns")))?;
            if f.dims != [slot.len()] {
                return Err(ckpt_err(format!("optimizer state {tag}{i} has dims {:?}", f.dims)));
            }
            *slot = f.to_f64();
        }
    }
    let mut k = 0;
    params.visit_mut("", &mut |_, t| {
        *t = Tensor::param(std::mem::take(&mut loaded[k]), t.shape());
        k += 1;
    });
    Ok(())
}

fn sibling(dir: &Path, tag: &str) -> Result<PathBuf> {
    let name = dir.file_name().ok_or_else(|| invalid("checkpoint path has no final component"))?;
    let mut s = std::ffi::OsString::from(".");
    s.push(name);
    s.push(format!(".{tag}-{}", std::process::id()));
    Ok(dir.with_file_name(s))
}

/// Writes the checkpoint into a temporary sibling directory and renames it
/// into place.
pub fn save_checkpoint(state: &TrainState, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if let Some(parent) = dir.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    let tmp = sibling(dir, "tmp")?;
    if tmp.exists() {
        fs::remove_dir_all(&tmp)?;
    }
    fs::create_dir_all(&tmp)?;
    let manifest = CheckpointManifest {
        format: 1,
        iteration: state.iteration,
        config_hash: state.config.architecture_hash(),
        generator: write_group(&tmp, "g", &state.generator, &state.opt_g)?,
        discriminators: write_group(&tmp, "d", &state.discriminators, &state.opt_d)?,
        adam_generator: AdamEntry { config: state.opt_g.config, steps: state.opt_g.steps },
        adam_discriminators: AdamEntry { config: state.opt_d.config, steps: state.opt_d.steps },
    };
    fs::write(tmp.join("manifest.json"), serde_json::to_string_pretty(&manifest).map_err(|e| ckpt_err(e.to_string()))?)?;
    fs::write(tmp.join("config.toml"), state.config.to_toml_string())?;
    let pool: Vec<f64> = state.pool.iter().flat_map(|f| f.values().iter().copied()).collect();
    write_tensor_file(
        tmp.join("illum_pool.ptns"),
        &TensorFile::new(vec![state.pool.len(), ILLUMINATION_DIM], TensorData::F64(pool))?,
    )?;
    if dir.exists() {
        let old = sibling(dir, "old")?;
        if old.exists() {
            fs::remove_dir_all(&old)?;
        }
        fs::rename(dir, &old)?;
        fs::rename(&tmp, dir)?;
        fs::remove_dir_all(&old)?;
    } else {
        fs::rename(&tmp, dir)?;
    }
    Ok(())
}

/// Restores a checkpoint using the configuration stored alongside it.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<TrainState> {
    let dir = dir.as_ref();
    let config = Config::load(dir.join("config.toml"))?;
    load_checkpoint_with(dir, config)
}

/// Restores a checkpoint under `config`, whose architecture must match the
/// stored one; schedule settings may differ.
pub fn load_checkpoint_with(dir: impl AsRef<Path>, config: Config) -> Result<TrainState> {
    let dir = dir.as_ref();
    let text = fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: CheckpointManifest = serde_json::from_str(&text).map_err(|e| ckpt_err(e.to_string()))?;
    if manifest.config_hash != config.architecture_hash() {
        return Err(ckpt_err("configuration does not match the checkpoint architecture"));
    }
    let pool_file = read_tensor_file(dir.join("illum_pool.ptns"))?;
    if pool_file.dims.len() != 2 || pool_file.dims[1] != ILLUMINATION_DIM {
        return Err(ckpt_err(format!("illumination pool has dims {:?}", pool_file.dims)));
    }
    let pool = pool_file
        .to_f64()
        .chunks_exact(ILLUMINATION_DIM)
        .map(|c| IlluminationFeature::new(c.to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let mut state = TrainState::new(config, pool)?;
    read_group(dir, "g", &manifest.generator, &mut state.generator, &mut state.opt_g)?;
    read_group(dir, "d", &manifest.discriminators, &mut state.discriminators, &mut state.opt_d)?;
    state.opt_g.config = manifest.adam_generator.config;
    state.opt_g.steps = manifest.adam_generator.steps;
    state.opt_d.config = manifest.adam_discriminators.config;
    state.opt_d.steps = manifest.adam_discriminators.steps;
    state.iteration = manifest.iteration;
    Ok(state)
}
