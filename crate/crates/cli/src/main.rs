//! `s3g`: synthesize datasets, train, render, evaluate and decompose.

mod config;

use std::fs;
use std::io::{LineWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use log::info;

use s3g_core::checkpoint::Checkpoint;
use s3g_core::data::synth::SyntheticSceneSpec;
use s3g_core::data::{load_manifest, split_train_test, synthesize};
use s3g_core::render::{render, save_npy, save_rgb_png, CameraModel, RenderOptions};
use s3g_core::train::{dynamic_scores, evaluate, load_frames, render_at, LogRecord, TrainConfig, Trainer};
use s3g_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "s3g", version, about = "Dynamic-scene reconstruction with deformable 3D Gaussians")]
struct Cli {
    /// Worker threads; falls back to S3G_THREADS, then to all cores.
    #[arg(long, global = true, env = "S3G_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Ray-trace a synthetic moving-object dataset.
    Synth {
        /// Scene description (TOML or JSON); the built-in scene when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Warm up, then train the deformation field clip by clip.
    Train {
        /// Training configuration (TOML or JSON).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a configuration key, e.g. `--set weights.reg_x=0`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start the field immediately; the whole budget goes to the clips.
        #[arg(long)]
        skip_warmup: bool,
        /// Total iterations; the warm-up keeps its share of the budget.
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render a checkpoint from a camera at a normalized time.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Camera as JSON (intrinsics, image size, world-to-camera matrix).
        #[arg(long)]
        camera: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        time: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// PSNR/SSIM (and masked variants) on a dataset split.
    Eval {
        /// One or more checkpoints; each frame uses the one whose time range covers it.
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = Split::Test)]
        split: Split,
        /// Every n-th frame is held out; defaults to the checkpoint's training setting.
        #[arg(long)]
        test_every: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-Gaussian dynamic scores and separate static/dynamic renders.
    Decompose {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Gaussians scoring at or above this are dynamic.
        #[arg(long, default_value_t = 0.05)]
        threshold: f64,
        /// Time samples for the score average.
        #[arg(long, default_value_t = 16)]
        samples: usize,
        /// Manifest frame whose camera and time are used for the renders.
        #[arg(long)]
        frame: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Split {
    Train,
    Test,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let keys = config::keys_help("Configuration keys (with defaults)", &TrainConfig::default());
    let spec_keys = config::keys_help("Scene keys (with defaults)", &SyntheticSceneSpec::default());
    let cmd = Cli::command()
        .after_help(keys.clone())
        .mut_subcommand("train", |c| c.after_help(keys))
        .mut_subcommand("synth", |c| c.after_help(spec_keys));
    let cli = match cmd.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Synth { spec, out, seed } => synth(spec.as_deref(), &out, seed),
        Command::Train {
            config,
            overrides,
            data,
            out,
            skip_warmup,
            iters,
            seed,
        } => {
            let base = match &config {
                Some(p) => config::parse_file(p)?,
                None => TrainConfig::default(),
            };
            let mut cfg = config::apply_overrides(&base, &overrides)?;
            if let Some(n) = iters {
                cfg = cfg.with_total_iters(n);
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if skip_warmup {
                cfg.warmup_iters = 0;
            }
            train(cfg, &data, &out)
        }
        Command::Render {
            checkpoint,
            camera,
            time,
            out,
        } => render_cmd(&checkpoint, &camera, time, &out),
        Command::Eval {
            checkpoint,
            data,
            split,
            test_every,
            out,
        } => eval(&checkpoint, &data, split, test_every, &out),
        Command::Decompose {
            checkpoint,
            data,
            out,
            threshold,
            samples,
            frame,
        } => decompose(&checkpoint, &data, &out, threshold, samples, frame),
    }
}

fn synth(spec: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let spec = match spec {
        Some(p) => config::parse_file(p)?,
        None => SyntheticSceneSpec::default(),
    };
    let m = synthesize(&spec, seed, out)?;
    info!("wrote {} frames to {}", m.frames.len(), out.display());
    Ok(())
}

fn train(cfg: TrainConfig, data: &Path, out: &Path) -> Result<()> {
    cfg.validate()?;
    let ds = load_manifest(data)?;
    let ck_dir = out.join("checkpoints");
    fs::create_dir_all(&ck_dir)?;
    fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
    let mut trainer = Trainer::from_dataset(cfg, &ds)?;
    trainer.set_log_sink(Box::new(LineWriter::new(fs::File::create(out.join("log.jsonl"))?)));
    info!(
        "{} training frames, {} initial gaussians",
        trainer.frames().len(),
        trainer.scene().len()
    );
    let result = trainer.run(|t, report| {
        let path = ck_dir.join(format!("clip_{:03}.s3g", report.clip));
        t.checkpoint().save(&path)?;
        info!(
            "clip {} (frames {}..{}) done at iteration {}, {} gaussians",
            report.clip,
            report.frames.start,
            report.frames.end,
            t.iteration(),
            t.scene().len()
        );
        Ok(())
    });
    // The loss table is useful for diagnosing an aborted run too.
    write_loss_csv(&out.join("loss.csv"), trainer.history())?;
    result?;
    trainer.checkpoint().save(&out.join("final.s3g"))?;
    info!("final checkpoint at {}", out.join("final.s3g").display());
    Ok(())
}

fn write_loss_csv(path: &Path, history: &[LogRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path)?);
    writeln!(w, "iteration,phase,clip,frame,rgb,depth,feat,ssim,tv,reg_x,reg_c,total,psnr,gaussians")?;
    for r in history {
        let t = &r.terms;
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.iteration,
            r.phase,
            r.clip.map(|c| c.to_string()).unwrap_or_default(),
            r.frame,
            t.rgb,
            t.depth,
            t.feat,
            t.ssim,
            t.tv,
            t.reg_x,
            t.reg_c,
            r.total,
            r.psnr,
            r.gaussians
        )?;
    }
    w.flush()?;
    Ok(())
}

fn render_cmd(checkpoint: &Path, camera: &Path, time: f64, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let text = fs::read_to_string(camera).map_err(|e| Error::Config(format!("{}: {e}", camera.display())))?;
    let cam: CameraModel = serde_json::from_str(&text)?;
    cam.validate()?;
    if !time.is_finite() {
        return Err(Error::Config(format!("time {time} is not finite")));
    }
    let r = render_at(&ck.scene, ck.field.as_ref(), &cam, time, &RenderOptions::default())?;
    fs::create_dir_all(out)?;
    save_rgb_png(&out.join("rgb.png"), &r.rgb, r.width, r.height)?;
    save_npy(&out.join("depth.npy"), &r.depth, &[r.height, r.width])?;
    save_npy(&out.join("alpha.npy"), &r.alpha, &[r.height, r.width])?;
    if r.semantic_dim > 0 {
        save_npy(&out.join("semantic.npy"), &r.semantic, &[r.height, r.width, r.semantic_dim])?;
    }
    Ok(())
}

fn eval(checkpoints: &[PathBuf], data: &Path, split: Split, test_every: Option<usize>, out: &Path) -> Result<()> {
    let models = checkpoints.iter().map(|p| Checkpoint::load(p)).collect::<Result<Vec<_>>>()?;
    let ds = load_manifest(data)?;
    let every = match test_every {
        Some(n) => n,
        None => models[0].meta["config"]["test_every"].as_u64().map_or(10, |n| n as usize),
    };
    let (train, test) = split_train_test(&ds, every)?;
    let frames = load_frames(if split == Split::Test { &test } else { &train })?;
    let report = evaluate(&models, &frames, &RenderOptions::default())?;
    info!("{} frames: PSNR {:.3} SSIM {:.4}", report.frames.len(), report.psnr, report.ssim);
    if let (Some(p), Some(s)) = (report.masked_psnr, report.masked_ssim) {
        info!("dynamic region: PSNR {p:.3} SSIM {s:.4}");
    }
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(out, serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn decompose(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    threshold: f64,
    samples: usize,
    frame: Option<usize>,
) -> Result<()> {
    if !threshold.is_finite() || threshold < 0.0 {
        return Err(Error::Config(format!("threshold {threshold} must be finite and nonnegative")));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let field = ck
        .field
        .as_ref()
        .ok_or_else(|| Error::Config(format!("{} holds no deformation field", checkpoint.display())))?;
    let ds = load_manifest(data)?;
    let scores = dynamic_scores(&ck.scene, field, samples)?;
    fs::create_dir_all(out)?;
    let mut w = std::io::BufWriter::new(fs::File::create(out.join("scores.csv"))?);
    writeln!(w, "gaussian,score")?;
    for (i, s) in scores.iter().enumerate() {
        writeln!(w, "{i},{s}")?;
    }
    w.flush()?;

    let b = field.bounds();
    let index = match frame {
        Some(i) if i < ds.len() => i,
        Some(i) => return Err(Error::Config(format!("frame {i} is out of range (dataset has {})", ds.len()))),
        // First frame inside the field's time range.
        None => ds.frames.iter().position(|f| f.time >= b.t_min && f.time <= b.t_max).unwrap_or(0),
    };
    let f = &ds.frames[index];
    let (deformed, _) = field.deform(&ck.scene, f.time)?;
    let (dynamic, fixed): (Vec<usize>, Vec<usize>) = (0..scores.len()).partition(|&i| scores[i] >= threshold);
    let opts = RenderOptions::default();
    for (name, keep) in [("all", None), ("dynamic", Some(&dynamic)), ("static", Some(&fixed))] {
        let subset = keep.map_or_else(|| deformed.clone(), |k| deformed.select(k));
        let (r, _) = render(&subset, &f.entry.camera, &opts)?;
        save_rgb_png(&out.join(format!("{name}.png")), &r.rgb, r.width, r.height)?;
    }
    let summary = serde_json::json!({
        "frame": index,
        "time": f.time,
        "threshold": threshold,
        "samples": samples,
        "gaussians": scores.len(),
        "dynamic": dynamic.len(),
        "static": fixed.len(),
    });
    fs::write(out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    info!("{} of {} gaussians are dynamic at threshold {threshold}", dynamic.len(), scores.len());
    Ok(())
}
