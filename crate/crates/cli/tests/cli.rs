use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use panofield::config::Config;
use panofield::imaging::load_rgb;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_panofield"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A micro dataset and a two-iteration checkpoint shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    dataset: PathBuf,
    checkpoint: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let dataset = root.join("data");
        let run_dir = root.join("run");
        let mut config = Config::micro();
        config.paths.dataset = Some(dataset.clone());
        config.paths.output = Some(run_dir.clone());
        let config_path = root.join("micro.toml");
        fs::write(&config_path, config.to_toml_string()).unwrap();
        ok(&["make-synthetic", s(&config_path), "-o", s(&dataset)]);
        ok(&["train", s(&config_path)]);
        Fixture { _dir: dir, root, config: config_path, dataset, checkpoint: run_dir.join("checkpoint") }
    })
}

#[test]
fn training_writes_log_and_checkpoint() {
    let f = fixture();
    let log = fs::read_to_string(f.root.join("run/train_log.csv")).unwrap();
    assert!(log.starts_with("iteration,total,"));
    assert_eq!(log.lines().count(), 3);
    assert!(f.checkpoint.join("manifest.json").is_file());
    assert!(f.checkpoint.join("config.toml").is_file());
}

#[test]
fn seeded_random_illumination_is_reproducible() {
    let f = fixture();
    let a = f.root.join("pano_a.png");
    let b = f.root.join("pano_b.png");
    for out in [&a, &b] {
        ok(&[
            "render-pano",
            s(&f.checkpoint),
            s(&f.config),
            "--position",
            "-0.5,1",
            "--heading",
            "0.3",
            "--illum",
            "random",
            "--seed",
            "7",
            "-o",
            s(out),
        ]);
    }
    let (ia, ib) = (load_rgb(&a).unwrap(), load_rgb(&b).unwrap());
    assert_eq!(ia.shape(), [3, 16, 64]);
    assert_eq!(ia.data, ib.data);
}

#[test]
fn illumination_file_and_null_styles_render() {
    let f = fixture();
    let feat = f.root.join("f.ptns");
    ok(&[
        "extract-illumination",
        s(&f.dataset.join("street_000.png")),
        s(&f.dataset.join("mask_000.png")),
        "-o",
        s(&feat),
    ]);
    for illum in [s(&feat), "null"] {
        let out = f.root.join(format!("pano_{}.png", illum.len()));
        ok(&["render-pano", s(&f.checkpoint), s(&f.config), "--position", "0,0", "--illum", illum, "-o", s(&out)]);
        assert!(out.is_file());
    }
}

#[test]
fn render_video_enumerates_frames() {
    let f = fixture();
    let traj = f.root.join("traj.csv");
    fs::write(&traj, "east_m,north_m,heading_rad\n0,0,0\n0.5,0,0.1\n1,0,0.2\n1.5,0,0.3\n2,0,0.4\n").unwrap();
    let frames = f.root.join("frames");
    ok(&["render-video", s(&f.checkpoint), s(&traj), "-o", s(&frames)]);
    let mut names: Vec<String> = fs::read_dir(&frames).unwrap().map(|e| e.unwrap().file_name().into_string().unwrap()).collect();
    names.sort();
    let expected: Vec<String> = (0..5).map(|i| format!("frame_{i:05}.png")).collect();
    assert_eq!(names, expected);
}

#[test]
fn render_sat_writes_the_requested_size() {
    let f = fixture();
    let out = f.root.join("sat.png");
    ok(&["render-sat", s(&f.checkpoint), "--factor", "2", "-o", s(&out)]);
    assert_eq!(load_rgb(&out).unwrap().shape(), [3, 8, 8]);
}

#[test]
fn eval_of_ground_truth_predictions_is_perfect() {
    let f = fixture();
    let preds = f.root.join("preds");
    fs::create_dir_all(&preds).unwrap();
    for e in fs::read_dir(&f.dataset).unwrap() {
        let p = e.unwrap().path();
        if p.file_name().unwrap().to_string_lossy().starts_with("street_") {
            fs::copy(&p, preds.join(p.file_name().unwrap())).unwrap();
        }
    }
    let report = f.root.join("report_gt.csv");
    ok(&["eval", s(&preds), s(&f.dataset), "-o", s(&report)]);
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "sample,psnr,ssim,perc,dino");
    assert_eq!(lines.len(), 1 + 3 + 1);
    for line in &lines[1..] {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells[1], "inf", "{line}");
        assert_eq!(cells[2], "1.000000", "{line}");
        assert_eq!(cells[3], "0.000000", "{line}");
        assert_eq!(cells[4], "");
    }
    assert!(lines[4].starts_with("mean,"));
}

#[test]
fn eval_of_a_checkpoint_reports_column_means() {
    let f = fixture();
    let tokens = f.root.join("tokens");
    fs::create_dir_all(&tokens).unwrap();
    let tf = |v: Vec<f64>| panofield::io::TensorFile::new(vec![2, 2], panofield::io::TensorData::F64(v)).unwrap();
    for i in 0..3 {
        let sign = if i == 1 { -1.0 } else { 1.0 };
        panofield::io::write_tensor_file(tokens.join(format!("street_{i:03}.gt.ptns")), &tf(vec![1.0, 0.0, 0.0, 2.0])).unwrap();
        panofield::io::write_tensor_file(tokens.join(format!("street_{i:03}.pred.ptns")), &tf(vec![sign, 0.0, 0.0, 2.0 * sign])).unwrap();
    }
    let report = f.root.join("report_ck.csv");
    ok(&["eval", s(&f.checkpoint), s(&f.dataset), "--tokens", s(&tokens), "-o", s(&report)]);
    let mut reader = csv::Reader::from_path(&report).unwrap();
    let rows: Vec<Vec<String>> = reader.records().map(|r| r.unwrap().iter().map(String::from).collect()).collect();
    assert_eq!(rows.len(), 4);
    let names: Vec<&str> = rows[..3].iter().map(|r| r[0].as_str()).collect();
    assert_eq!(names, ["street_000.png", "street_001.png", "street_002.png"]);
    for col in 1..=4 {
        let vals: Vec<f64> = rows[..3].iter().map(|r| r[col].parse().unwrap()).collect();
        let mean: f64 = rows[3][col].parse().unwrap();
        assert!((mean - vals.iter().sum::<f64>() / 3.0).abs() < 1e-5, "column {col}");
    }
    let dino: Vec<f64> = rows[..3].iter().map(|r| r[4].parse().unwrap()).collect();
    assert_eq!(dino, [1.0, -1.0, 1.0]);
}

#[test]
fn resume_continues_from_a_checkpoint() {
    let f = fixture();
    let mut config = Config::load(&f.config).unwrap();
    config.train.iterations = 3;
    let path = f.root.join("longer.toml");
    fs::write(&path, config.to_toml_string()).unwrap();
    let out = f.root.join("resumed");
    ok(&["train", s(&path), "--resume", s(&f.checkpoint), "-o", s(&out)]);
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.lines().nth(1).unwrap().starts_with("2,"));
}

#[test]
fn usage_errors_exit_nonzero() {
    let f = fixture();
    for args in [
        vec!["frobnicate"],
        vec!["render-pano", s(&f.checkpoint), s(&f.config), "--position", "nonsense", "-o", "x.png"],
        vec!["render-sat", s(&f.checkpoint), "--bogus", "-o", "x.png"],
        vec!["eval", "/nonexistent/source", "/nonexistent/data", "-o", "r.csv"],
    ] {
        let out = run(&args);
        assert!(!out.status.success(), "{args:?} should fail");
        assert!(!out.stderr.is_empty());
    }
    let bad = f.root.join("bad.toml");
    fs::write(&bad, "[train]\nbatch_size = 0\n").unwrap();
    let out = run(&["make-synthetic", s(&bad), "-o", s(&f.root.join("never"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));
}
