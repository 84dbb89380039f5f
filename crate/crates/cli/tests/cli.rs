use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use s3g_core::checkpoint::Checkpoint;
use s3g_core::data::load_manifest;
use s3g_core::data::synth::tiny_spec;
use s3g_core::field::FieldConfig;
use s3g_core::render::{save_npy, RenderOptions};
use s3g_core::train::{render_at, EvalReport, TrainConfig, Trainer};
use serde_json::Value;

fn s3g(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_s3g"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = s3g(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn small_config() -> TrainConfig {
    TrainConfig {
        total_iters: 12,
        warmup_iters: 6,
        sh_degree: 1,
        test_every: 3,
        voxel_size: 0.3,
        log_interval: 2,
        field: FieldConfig {
            base_resolution: 8,
            time_resolution: 4,
            scales: vec![1, 2],
            hidden_dim: 4,
            merge_width: 8,
            feature_dim: 8,
            head_width: 8,
            ..FieldConfig::default()
        },
        ..TrainConfig::default()
    }
}

/// A tiny synthetic dataset plus a matching training config file.
struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let spec = dir.path().join("spec.json");
        fs::write(&spec, serde_json::to_string(&tiny_spec()).unwrap()).unwrap();
        fs::write(dir.path().join("train.json"), serde_json::to_string(&small_config()).unwrap()).unwrap();
        ok(&["synth", "--spec", p(&spec), "--out", p(&dir.path().join("data")), "--seed", "3"]);
        Self { dir }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn train(&self, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let (cfg, data) = (self.path("train.json"), self.path("data"));
        let mut args = vec!["--threads", "1", "train", "--config", p(&cfg), "--data", p(&data), "--out", p(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

fn files(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_deterministic_and_writes_masks() {
    let f = Fixture::new();
    let again = f.path("again");
    ok(&["synth", "--spec", p(&f.path("spec.json")), "--out", p(&again), "--seed", "3"]);
    let (a, b) = (files(&f.path("data")), files(&again));
    assert_eq!(a, b);
    assert!(a.iter().any(|(n, _)| n.starts_with("masks")));
}

#[test]
fn invalid_inputs_exit_with_code_2() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("bad.toml");
    fs::write(&spec, "frames = 4\nno_such_key = 1\n").unwrap();
    let o = s3g(&["synth", "--spec", p(&spec), "--out", p(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("no_such_key"));

    let missing = dir.path().join("nowhere");
    let o = s3g(&["train", "--data", p(&missing), "--out", p(&dir.path().join("o"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = s3g(&["train", "--data", p(&missing), "--out", "o", "--set", "weights.nope=1"]);
    assert_eq!(o.status.code(), Some(2));

    let o = s3g(&["train", "--data", p(&missing), "--out", "o", "--set", "warmup_iters=60000"]);
    assert_eq!(o.status.code(), Some(2));

    assert_eq!(s3g(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn help_lists_every_config_key() {
    fn walk(prefix: &str, v: &Value, out: &mut Vec<String>) {
        match v {
            Value::Object(m) => m.iter().for_each(|(k, c)| {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                walk(&key, c, out)
            }),
            _ => out.push(prefix.to_string()),
        }
    }
    let mut keys = Vec::new();
    walk("", &serde_json::to_value(TrainConfig::default()).unwrap(), &mut keys);
    assert!(keys.len() > 40);
    for args in [&["--help"][..], &["train", "--help"][..]] {
        let help = String::from_utf8(ok(args).stdout).unwrap();
        for k in &keys {
            assert!(help.contains(&format!("  {k} = ")), "{args:?} is missing {k}");
        }
    }
}

#[test]
fn zero_iterations_reproduce_initialization() {
    let f = Fixture::new();
    let out = f.train("run0", &["--iters", "0"]);
    let ck = Checkpoint::load(&out.join("final.s3g")).unwrap();
    let ds = load_manifest(&f.path("data")).unwrap();
    let init = Trainer::from_dataset(small_config().with_total_iters(0), &ds).unwrap();
    assert_eq!(&ck.scene, init.scene());
    assert!(ck.field.unwrap().params().iter().all(|v| v.is_finite()));
    for name in ["log.jsonl", "loss.csv", "config.json", "checkpoints/clip_000.s3g"] {
        assert!(out.join(name).is_file(), "{name}");
    }
}

#[test]
fn training_is_deterministic_and_downstream_commands_work() {
    let f = Fixture::new();
    let a = f.train("a", &["--seed", "9"]);
    let b = f.train("b", &["--seed", "9"]);
    assert_eq!(fs::read(a.join("final.s3g")).unwrap(), fs::read(b.join("final.s3g")).unwrap());
    let log = fs::read_to_string(a.join("log.jsonl")).unwrap();
    assert!(log.lines().all(|l| serde_json::from_str::<Value>(l).is_ok()));
    let cfg: TrainConfig = serde_json::from_str(&fs::read_to_string(a.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg.seed, 9);

    // Render at a training timestamp matches an in-process render exactly.
    let ck_path = a.join("final.s3g");
    let ck = Checkpoint::load(&ck_path).unwrap();
    let ds = load_manifest(&f.path("data")).unwrap();
    let frame = &ds.frames[1];
    let cam = f.path("cam.json");
    fs::write(&cam, serde_json::to_string(&frame.entry.camera).unwrap()).unwrap();
    let time = format!("{}", frame.time);
    let rdir = f.path("render");
    ok(&["render", "--checkpoint", p(&ck_path), "--camera", p(&cam), "--time", &time, "--out", p(&rdir)]);
    let r = render_at(&ck.scene, ck.field.as_ref(), &frame.entry.camera, frame.time, &RenderOptions::default()).unwrap();
    let expect = f.path("expect.npy");
    save_npy(&expect, &r.depth, &[r.height, r.width]).unwrap();
    assert_eq!(fs::read(rdir.join("depth.npy")).unwrap(), fs::read(&expect).unwrap());
    assert!(rdir.join("rgb.png").is_file() && rdir.join("semantic.npy").is_file());
    // Between timestamps is fine too.
    ok(&["render", "--checkpoint", p(&ck_path), "--camera", p(&cam), "--time", "0.37", "--out", p(&rdir)]);

    fs::write(&cam, "{\"fx\": 10}").unwrap();
    let o = s3g(&["render", "--checkpoint", p(&ck_path), "--camera", p(&cam), "--out", p(&rdir)]);
    assert_eq!(o.status.code(), Some(2));

    // Eval: totals are per-frame means; masked metrics follow the masks.
    let report_path = f.path("report.json");
    ok(&["eval", "--checkpoint", p(&ck_path), "--data", p(&f.path("data")), "--split", "test", "--out", p(&report_path)]);
    let report: EvalReport = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(report.frames.len(), 2);
    let mean = report.frames.iter().map(|m| m.ssim).sum::<f64>() / 2.0;
    assert!((report.ssim - mean).abs() < 1e-12);
    assert!(report.masked_psnr.is_some());

    let mut manifest: Value = serde_json::from_str(&fs::read_to_string(f.path("data/manifest.json")).unwrap()).unwrap();
    for fr in manifest["frames"].as_array_mut().unwrap() {
        let fr = fr.as_object_mut().unwrap();
        fr.remove("mask");
        fr.remove("boxes");
    }
    fs::write(f.path("data/manifest.json"), serde_json::to_string(&manifest).unwrap()).unwrap();
    ok(&["eval", "--checkpoint", p(&ck_path), "--data", p(&f.path("data")), "--out", p(&report_path)]);
    let report: Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(report.get("masked_psnr").is_none());

    // Decompose: threshold 0 puts every Gaussian in the dynamic subset.
    let ddir = f.path("decomp");
    ok(&["decompose", "--checkpoint", p(&ck_path), "--data", p(&f.path("data")), "--out", p(&ddir), "--threshold", "0"]);
    let summary: Value = serde_json::from_str(&fs::read_to_string(ddir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["dynamic"], summary["gaussians"]);
    assert_eq!(summary["static"], 0);
    let csv = fs::read_to_string(ddir.join("scores.csv")).unwrap();
    assert_eq!(csv.lines().count(), ck.scene.len() + 1);
    for name in ["all.png", "dynamic.png", "static.png"] {
        assert!(ddir.join(name).is_file());
    }
}
