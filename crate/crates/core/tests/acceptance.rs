//! Acceptance suite. Each criterion prints one `PASS`/`FAIL` line to stderr
//! (uncaptured, so it shows up in `cargo test` output) and then asserts.

mod common;

use std::io::Write;
use std::time::{Duration, Instant};

use rand::Rng;

use common::*;
use s3g_core::data::synth::tiny_spec;
use s3g_core::data::synth::{read_ground_truth, GroundTruth};
use s3g_core::data::{load_manifest, split_train_test, synthesize, SceneDataset, SyntheticSceneSpec};
use s3g_core::field::{FieldConfig, HexPlaneField, SceneBounds};
use s3g_core::render::{render, render_backward, render_with_view_dirs, ImageGrads, RenderOptions};
use s3g_core::scene::sh::rgb_to_dc;
use s3g_core::scene::{DeformedGaussians, GaussianSet};
use s3g_core::train::{dynamic_scores, evaluate, load_frames, render_at, EvalReport, TrainConfig, TrainFrame, Trainer};

fn report(criterion: u32, title: &str, pass: bool, detail: &str) {
    let line = format!(
        "[acceptance] criterion {criterion} {:<34} {}  {detail}\n",
        title,
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
}

// ---------------------------------------------------------------- 1

/// Loss `Σ up · image` over every rendered channel.
fn image_loss(g: &DeformedGaussians, cam: &s3g_core::render::CameraModel, dirs: &[[f64; 3]], up: &ImageGrads) -> f64 {
    let (r, _) = render_with_view_dirs(g, cam, &RenderOptions::default(), Some(dirs)).unwrap();
    dot(&r.rgb, &up.rgb) + dot(&r.depth, &up.depth) + dot(&r.semantic, &up.semantic) + dot(&r.alpha, &up.alpha)
}

/// A 5-Gaussian scene on which the rendered loss is smooth: no alpha sits
/// near the 1/255 floor or the 0.99 clip, no colour channel is near its
/// zero clamp and transmittance stays far above the early-stop level.
/// Finite differences are meaningless across those kinks.
fn smooth_fd_scene() -> (DeformedGaussians, s3g_core::render::CameraModel, u64) {
    let cam = identity_camera(16, 16, 16.0);
    let opts = RenderOptions::default();
    for seed in 0..500u64 {
        let mut r = rng(seed);
        let mut s = GaussianSet::empty(1);
        for _ in 0..5 {
            let z = r.random_range(2.5..4.0);
            let pos = [r.random_range(-0.12..0.12) * z, r.random_range(-0.12..0.12) * z, z];
            let ls = [0; 3].map(|_| r.random_range(-1.8..-0.9));
            let q = [0; 4].map(|_| r.random_range(-1.0..1.0));
            let sh: Vec<f64> = (0..12)
                .map(|k| if k < 3 { r.random_range(0.0..1.5) } else { r.random_range(-0.2..0.2) })
                .collect();
            s.push(pos, ls, q, r.random_range(-1.5..1.5), &sh);
        }
        s.normalize_rotations();
        s.active_sh_degree = 1;
        let mut g = DeformedGaussians::from_static(&s, 2);
        for v in &mut g.semantic {
            *v = r.random_range(-1.0..1.0);
        }
        let splats = reference_splats(&g, &cam, &opts, None);
        let smooth = splats.len() == 5
            && splats.iter().all(|sp| sp.color.iter().all(|c| *c > 0.05))
            && (0..16).all(|y| {
                (0..16).all(|x| {
                    splats.iter().all(|sp| {
                        let a = raw_alpha(sp, x, y);
                        (a * 255.0).ln().abs() > 0.05 && a < 0.95
                    })
                })
            });
        // Every Gaussian must actually cover some pixels.
        let covered = splats
            .iter()
            .all(|sp| (0..16).any(|y| (0..16).any(|x| raw_alpha(sp, x, y) > 0.05)));
        if smooth && covered {
            return (g, cam, seed);
        }
    }
    panic!("no smooth scene found");
}

fn renderer_fd_worst() -> (Vec<(&'static str, f64)>, u64) {
    let (g, cam, seed) = smooth_fd_scene();
    let dirs: Vec<[f64; 3]> = (0..g.len())
        .map(|i| {
            let p = nalgebra::Vector3::from_column_slice(&g.positions[3 * i..3 * i + 3]);
            let v = (p - cam.center()).normalize();
            [v.x, v.y, v.z]
        })
        .collect();
    let mut r = rng(seed + 1000);
    let n = 16 * 16;
    let up = ImageGrads {
        rgb: random_vec(3 * n, &mut r),
        depth: random_vec(n, &mut r),
        semantic: random_vec(2 * n, &mut r),
        alpha: random_vec(n, &mut r),
    };
    let (_, rec) = render_with_view_dirs(&g, &cam, &RenderOptions::default(), Some(&dirs)).unwrap();
    let grads = render_backward(&rec, &g, &up).unwrap();

    type Access = fn(&mut DeformedGaussians) -> &mut Vec<f64>;
    let groups: [(&str, Access, &Vec<f64>); 6] = [
        ("positions", |d| &mut d.positions, &grads.positions),
        ("log_scales", |d| &mut d.log_scales, &grads.log_scales),
        ("rotations", |d| &mut d.rotations, &grads.rotations),
        ("opacity_logits", |d| &mut d.opacity_logits, &grads.opacity_logits),
        ("sh_coeffs", |d| &mut d.sh_coeffs, &grads.sh_coeffs),
        ("semantic", |d| &mut d.semantic, &grads.semantic),
    ];
    let mut out = Vec::new();
    for (name, access, analytic) in groups {
        let mut worst = 0.0f64;
        for k in 0..analytic.len() {
            let fd = central_diff(
                |h| {
                    let mut p = g.clone();
                    access(&mut p)[k] += h;
                    image_loss(&p, &cam, &dirs, &up)
                },
                1e-4,
            );
            worst = worst.max(rel_err(fd, analytic[k]));
        }
        out.push((name, worst));
    }
    (out, seed)
}

fn field_fd_worst() -> (f64, usize) {
    let cfg = FieldConfig {
        base_resolution: 5,
        time_resolution: 4,
        scales: vec![1, 2],
        hidden_dim: 3,
        merge_width: 6,
        feature_dim: 5,
        head_width: 6,
        semantic_dim: 2,
        ..FieldConfig::default()
    };
    let bounds = SceneBounds::new([-1.0; 3], [1.0; 3], 0.0, 1.0).unwrap();
    let mut r = rng(77);
    let mut f = HexPlaneField::new(cfg, &bounds, 1, &mut r).unwrap();
    let mlp_len = f.layout().mlp_len;
    // Random everywhere so that no gradient path is trivially zero.
    for (i, v) in f.params_mut().iter_mut().enumerate() {
        *v = if i < mlp_len { r.random_range(-0.8..0.8) } else { r.random_range(0.3..1.2) };
    }
    // Sample points away from lattice cell edges at every scale so a
    // perturbation never crosses a bilinear kink.
    let t = 0.41;
    let mut scene = GaussianSet::empty(1);
    while scene.len() < 5 {
        let p = [0; 3].map(|_| r.random_range(-0.9..0.9));
        let c = f.bounds().normalize(p[0], p[1], p[2], t);
        let interior = f.layout().planes.iter().all(|s| {
            [(c[s.axes.0], s.res_u), (c[s.axes.1], s.res_v)].iter().all(|&(u, res)| {
                let g = u * (res - 1) as f64;
                (g - g.round()).abs() > 0.01
            })
        });
        if interior {
            let sh: Vec<f64> = (0..12).map(|_| r.random_range(-0.5..0.5)).collect();
            scene.push(p, [-2.0; 3], [1.0, 0.0, 0.0, 0.0], 0.0, &sh);
        }
    }
    let n = scene.len();
    let (up_x, up_sh, up_sem) = (random_vec(3 * n, &mut r), random_vec(12 * n, &mut r), random_vec(2 * n, &mut r));
    let loss = |f: &HexPlaneField| {
        let (d, _) = f.deform(&scene, t).unwrap();
        dot(&d.positions, &up_x) + dot(&d.sh_coeffs, &up_sh) + dot(&d.semantic, &up_sem)
    };
    let (_, tape) = f.deform(&scene, t).unwrap();
    let g = f.backward(&tape, &up_x, &up_sh, &up_sem).unwrap();
    let mut worst = 0.0f64;
    for k in 0..f.param_count() {
        let fd = central_diff(
            |h| {
                let mut p = f.clone();
                p.params_mut()[k] += h;
                loss(&p)
            },
            1e-4,
        );
        worst = worst.max(rel_err(fd, g.params[k]));
    }
    // Every plane grid and every MLP layer must be exercised.
    let planes_touched = f
        .layout()
        .planes
        .iter()
        .filter(|s| g.params[s.offset..s.offset + s.len(f.config().hidden_dim)].iter().any(|v| *v != 0.0))
        .count();
    assert_eq!(planes_touched, f.layout().planes.len());
    assert!(g.params[..mlp_len].iter().filter(|v| **v != 0.0).count() > mlp_len / 2);
    (worst, f.param_count())
}

#[test]
fn criterion_1_gradient_correctness() {
    let t0 = Instant::now();
    let (groups, seed) = renderer_fd_worst();
    let (field_worst, field_params) = field_fd_worst();
    let elapsed = t0.elapsed();
    let render_worst = groups.iter().map(|g| g.1).fold(0.0, f64::max);
    let pass = render_worst < 1e-4 && field_worst < 1e-5 && elapsed < Duration::from_secs(60);
    let per_group: Vec<String> = groups.iter().map(|(n, w)| format!("{n} {w:.1e}")).collect();
    report(
        1,
        "gradient correctness",
        pass,
        &format!(
            "renderer worst {render_worst:.2e} (<1e-4; scene seed {seed}; {}), field worst {field_worst:.2e} over {field_params} params (<1e-5), {:.1}s",
            per_group.join(", "),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 2

#[test]
fn criterion_2_rasterizer_matches_naive_reference() {
    let t0 = Instant::now();
    let opts = RenderOptions::default();
    let mut worst = 0.0f64;
    let mut total = 0;
    for seed in 0..20u64 {
        let mut r = rng(seed);
        let n = r.random_range(1..=500);
        let cam = orbit_camera(64, 64, &mut r);
        let g = random_gaussians(n, &SceneRanges::default(), &mut r);
        let (fast, _) = render(&g, &cam, &opts).unwrap();
        let slow = naive_render(&g, &cam, &opts);
        for (a, b) in [(&fast.rgb, &slow.rgb), (&fast.depth, &slow.depth), (&fast.semantic, &slow.semantic), (&fast.alpha, &slow.alpha)] {
            worst = worst.max(max_abs_diff(a, b));
        }
        total += n;
    }
    let elapsed = t0.elapsed();
    let pass = worst <= 1e-6 && elapsed < Duration::from_secs(30);
    report(
        2,
        "rasterizer oracle equivalence",
        pass,
        &format!("max |tiled - naive| {worst:.2e} (<=1e-6) over 20 scenes / {total} Gaussians, {:.1}s", elapsed.as_secs_f64()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 3

fn two_gaussian_closed_form() -> f64 {
    // Both means sit exactly on the centre of pixel (8, 8) with opacity 0.5,
    // so each contributes alpha 0.5 there.
    let cam = identity_camera(16, 16, 16.0);
    let c1 = [0.9, 0.2, 0.4];
    let c2 = [0.1, 0.7, 0.3];
    let mut s = GaussianSet::empty(0);
    s.push([0.125, 0.125, 4.0], [-2.0; 3], [1.0, 0.0, 0.0, 0.0], 0.0, &c1.map(rgb_to_dc));
    s.push([0.15625, 0.15625, 5.0], [-2.0; 3], [1.0, 0.0, 0.0, 0.0], 0.0, &c2.map(rgb_to_dc));
    let (r, _) = render(&DeformedGaussians::from_static(&s, 0), &cam, &RenderOptions::default()).unwrap();
    let p = 8 * 16 + 8;
    (0..3)
        .map(|ch| (r.rgb[3 * p + ch] - (0.5 * c1[ch] + 0.25 * c2[ch])).abs())
        .fold((r.alpha[p] - 0.75).abs(), f64::max)
}

#[test]
fn criterion_3_compositing_invariants() {
    let opts = RenderOptions::default();
    let (mut min_weight, mut sum_err) = (f64::INFINITY, 0.0f64);
    let mut order_exact = true;
    for seed in 0..10u64 {
        let mut r = rng(100 + seed);
        let cam = orbit_camera(48, 40, &mut r);
        let g = random_gaussians(300, &SceneRanges::default(), &mut r);
        let (img, rec) = render(&g, &cam, &opts).unwrap();
        for y in 0..cam.height {
            for x in 0..cam.width {
                let w = rec.pixel_weights(x, y);
                let sum: f64 = w.iter().map(|(_, v)| v).sum();
                min_weight = w.iter().map(|(_, v)| *v).fold(min_weight, f64::min);
                sum_err = sum_err.max((sum - (1.0 - rec.final_transmittance(x, y))).abs());
            }
        }
        let mut order: Vec<usize> = (0..g.len()).collect();
        for i in (1..order.len()).rev() {
            order.swap(i, r.random_range(0..=i));
        }
        let (shuffled, _) = render(&g.select(&order), &cam, &opts).unwrap();
        order_exact &= shuffled == img;
    }
    let closed = two_gaussian_closed_form();
    let pass = min_weight >= 0.0 && sum_err < 1e-12 && closed < 1e-12 && order_exact;
    report(
        3,
        "compositing invariants",
        pass,
        &format!(
            "min weight {min_weight:.2e}, |sum w - (1-T)| {sum_err:.1e}, two-Gaussian error {closed:.1e}, order invariance bit-exact: {order_exact}"
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 4

/// Reduced field used for the CPU training runs.
fn cpu_field() -> FieldConfig {
    FieldConfig {
        base_resolution: 32,
        scales: vec![1, 2],
        hidden_dim: 16,
        merge_width: 32,
        feature_dim: 32,
        head_width: 32,
        ..FieldConfig::default()
    }
}

#[test]
fn criterion_4_zero_init_identity() {
    let dir = tempfile::tempdir().unwrap();
    synthesize(&tiny_spec(), 2, dir.path()).unwrap();
    let ds = load_manifest(dir.path()).unwrap();
    let cfg = TrainConfig {
        total_iters: 200,
        warmup_iters: 150,
        sh_degree: 1,
        voxel_size: 0.3,
        test_every: 3,
        field: cpu_field(),
        ..TrainConfig::default()
    };
    let mut t = Trainer::from_dataset(cfg, &ds).unwrap();
    t.warmup().unwrap();
    t.start_field().unwrap();
    let opts = RenderOptions::default();
    let mut identical = 0;
    for f in t.frames() {
        let s = render_at(t.scene(), None, &f.camera, f.time, &opts).unwrap();
        let d = render_at(t.scene(), t.field(), &f.camera, f.time, &opts).unwrap();
        if s.rgb == d.rgb && s.depth == d.depth && s.alpha == d.alpha {
            identical += 1;
        }
    }
    let n = t.frames().len();
    let pass = identical == n;
    report(
        4,
        "zero-init identity",
        pass,
        &format!("{identical}/{n} training timestamps bit-identical after {} warm-up iterations", t.iteration()),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 5, 6, 7

/// Schedule for the 3k-iteration CPU runs on the default synthetic scene.
/// The field learning rates are raised tenfold to compensate for a schedule
/// roughly fifteen times shorter than the reference one.
fn reconstruction_config() -> TrainConfig {
    let mut cfg = TrainConfig {
        total_iters: 3000,
        warmup_iters: 500,
        sh_degree: 1,
        field: cpu_field(),
        field_lr_start: 1.6e-2,
        field_lr_end: 1.6e-3,
        field_mlp_lr_scale: 0.1,
        ..TrainConfig::default()
    };
    cfg.densify.max_gaussians = Some(5000);
    cfg
}

struct Run {
    report: EvalReport,
    /// Time-averaged offset norm per Gaussian; `None` for the static model.
    scores: Option<Vec<f64>>,
    inside: Vec<bool>,
    seconds: f64,
}

impl Run {
    fn mean_score(&self, inside: bool) -> f64 {
        let s = self.scores.as_ref().expect("dynamic run");
        let (sum, n) = s
            .iter()
            .zip(&self.inside)
            .filter(|(_, i)| **i == inside)
            .fold((0.0, 0usize), |(a, n), (v, _)| (a + v, n + 1));
        sum / n.max(1) as f64
    }
}

fn train_and_score(cfg: TrainConfig, ds: &SceneDataset, test: &[TrainFrame], gt: &GroundTruth, dynamic: bool) -> Run {
    let start = Instant::now();
    let mut t = Trainer::from_dataset(cfg.clone(), ds).unwrap();
    if dynamic {
        t.run(|_, _| Ok(())).unwrap();
    } else {
        t.train_static(cfg.total_iters).unwrap();
    }
    let report = evaluate(&[t.checkpoint()], test, &cfg.render).unwrap();
    let scene = t.scene();
    // A Gaussian belongs to the dynamic region when its canonical position
    // falls inside the object's true box at any frame.
    let inside = (0..scene.len())
        .map(|i| {
            let p = &scene.positions[3 * i..3 * i + 3];
            gt.frames
                .iter()
                .flat_map(|f| &f.dynamic_boxes)
                .any(|b| (0..3).all(|a| (p[a] - b.center[a]).abs() <= b.half_extents[a]))
        })
        .collect();
    let scores = t.field().map(|f| dynamic_scores(scene, f, 10).unwrap());
    Run {
        report,
        scores,
        inside,
        seconds: start.elapsed().as_secs_f64(),
    }
}

#[test]
fn criteria_5_6_7_synthetic_training() {
    let dir = tempfile::tempdir().unwrap();
    synthesize(&SyntheticSceneSpec::default(), 1, dir.path()).unwrap();
    let ds = load_manifest(dir.path()).unwrap();
    let gt = read_ground_truth(dir.path()).unwrap();
    let cfg = reconstruction_config();
    let (_, test_split) = split_train_test(&ds, cfg.test_every).unwrap();
    let test = load_frames(&test_split).unwrap();

    let full = train_and_score(cfg.clone(), &ds, &test, &gt, true);
    let baseline = train_and_score(cfg.clone(), &ds, &test, &gt, false);
    let cold = train_and_score(TrainConfig { warmup_iters: 0, ..cfg.clone() }, &ds, &test, &gt, true);
    let mut unreg_cfg = cfg.clone();
    unreg_cfg.weights.reg_x = 0.0;
    let unreg = train_and_score(unreg_cfg, &ds, &test, &gt, true);

    let gain = full.report.psnr - baseline.report.psnr;
    let masked = |r: &Run| r.report.masked_psnr.expect("test frames carry dynamic masks");
    let masked_gain = masked(&full) - masked(&baseline);
    let (inside, outside) = (full.mean_score(true), full.mean_score(false));
    let ratio = inside / outside;
    let pass_5 = gain >= 2.0 && masked_gain >= 3.0 && ratio >= 5.0;
    report(
        5,
        "synthetic dynamic reconstruction",
        pass_5,
        &format!(
            "PSNR {:.2} vs static {:.2} ({gain:+.2} dB, need +2); masked {:.2} vs {:.2} ({masked_gain:+.2} dB, need +3); \
             score inside {inside:.4} / outside {outside:.4} = {ratio:.2}x (need 5x); {} Gaussians; {:.0} s + {:.0} s",
            full.report.psnr,
            baseline.report.psnr,
            masked(&full),
            masked(&baseline),
            full.inside.len(),
            full.seconds,
            baseline.seconds,
        ),
    );

    let pass_6 = full.report.psnr >= cold.report.psnr;
    report(
        6,
        "warm-up ablation direction",
        pass_6,
        &format!(
            "test PSNR with 500 warm-up iterations {:.2}, without {:.2}; {:.0} s",
            full.report.psnr, cold.report.psnr, cold.seconds
        ),
    );

    let (with_reg, without_reg) = (full.mean_score(false), unreg.mean_score(false));
    let pass_7 = with_reg < without_reg;
    report(
        7,
        "regularizer effect direction",
        pass_7,
        &format!(
            "mean offset over static-region Gaussians {with_reg:.4} with reg_x 0.01, {without_reg:.4} with 0; {:.0} s",
            unreg.seconds
        ),
    );

    assert!(pass_5 && pass_6 && pass_7, "criteria 5/6/7: {pass_5}/{pass_6}/{pass_7}");
}

// ---------------------------------------------------------------- 8

#[test]
fn criterion_8_loss_weight_conformance() {
    let c = TrainConfig::default();
    let w = c.weights;
    let weights = [w.rgb, w.depth, w.feat, w.ssim, w.tv, w.reg_x, w.reg_c];
    let pass = weights == [1.0, 0.1, 0.1, 0.1, 0.1, 0.01, 0.01]
        && c.field.base_resolution == 64
        && (c.field_lr_start, c.field_lr_end) == (1.6e-3, 1.6e-4)
        && c.warmup_iters == 5000
        && c.total_iters == 50_000
        && c.clip_length_frames == 50;
    report(
        8,
        "loss-weight conformance",
        pass,
        &format!(
            "weights {weights:?}, base res {}, field lr {}->{}, warm-up {}, clip {} frames",
            c.field.base_resolution, c.field_lr_start, c.field_lr_end, c.warmup_iters, c.clip_length_frames
        ),
    );
    assert!(pass);
}

// ---------------------------------------------------------------- 9

#[test]
fn criterion_9_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let spec = SyntheticSceneSpec {
        frames: 8,
        ..tiny_spec()
    };
    synthesize(&spec, 4, dir.path()).unwrap();
    let ds = load_manifest(dir.path()).unwrap();
    let mut cfg = TrainConfig {
        total_iters: 300,
        warmup_iters: 100,
        clip_length_frames: 4,
        sh_degree: 1,
        sh_increment_interval: 50,
        voxel_size: 0.3,
        test_every: 4,
        seed: 11,
        field: cpu_field(),
        ..TrainConfig::default()
    };
    // Densification and an opacity reset both fall inside the run.
    cfg.densify.start = 20;
    cfg.densify.interval = 20;
    cfg.densify.reference_iters = cfg.total_iters;
    cfg.densify.until = 250;
    cfg.densify.opacity_reset_interval = 120;
    cfg.densify.max_gaussians = Some(3000);
    let pool = rayon::ThreadPoolBuilder::new().num_threads(2).build().unwrap();
    let run = || {
        pool.install(|| {
            let mut t = Trainer::from_dataset(cfg.clone(), &ds).unwrap();
            t.run(|_, _| Ok(())).unwrap();
            (t.checkpoint().to_bytes().unwrap(), t.scene().len())
        })
    };
    let (a, n) = run();
    let (b, _) = run();
    let pass = a == b;
    report(
        9,
        "determinism",
        pass,
        &format!("two full runs ({} iterations, 2 clips, {n} Gaussians): checkpoints of {} bytes identical: {pass}", cfg.total_iters, a.len()),
    );
    assert!(pass);
}
