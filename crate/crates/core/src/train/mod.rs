//! Optimization schedule: static warm-up, joint 4D training of Gaussians and
//! field, adaptive density control and clip chaining.

mod eval;

pub use eval::{dynamic_scores, evaluate, render_at, EvalReport, FrameMetrics};

use std::io::Write;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{FrameData, SceneDataset};
use crate::field::{FieldConfig, HexPlaneField, SceneBounds};
use crate::loss::{
    depth_l2_grad, feat_l2_grad, l1_rgb_grad, reg_offsets, reg_offsets_grad, ssim_grad, total_loss, LossTerms,
    LossWeights,
};
use crate::metrics::psnr;
use crate::optim::{exp_decay, Adam, AdamState, GaussianLrs, GaussianOptimizer};
use crate::render::{render, render_backward, CameraModel, GaussianGrads, ImageGrads, RenderOptions};
use crate::scene::{
    densify_and_prune, init_from_points, reset_opacity, DeformedGaussians, DensifyOptions, GaussianSet, InitOptions,
};
use crate::{Error, Result};

/// Adaptive density control schedule (3DGS defaults).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DensifyConfig {
    pub interval: usize,
    pub start: usize,
    /// Last densification iteration for a run of `reference_iters`; scaled
    /// proportionally to the actual `total_iters`.
    pub until: usize,
    pub reference_iters: usize,
    pub grad_threshold: f64,
    pub percent_dense: f64,
    pub min_opacity: f64,
    pub opacity_reset_interval: usize,
    /// Optional cap on the number of Gaussians; unlimited by default.
    pub max_gaussians: Option<usize>,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self {
            interval: 100,
            start: 500,
            until: 15_000,
            reference_iters: 30_000,
            grad_threshold: 2e-4,
            percent_dense: 0.01,
            min_opacity: 0.005,
            opacity_reset_interval: 3000,
            max_gaussians: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// All iterations, warm-up included.
    pub total_iters: usize,
    pub warmup_iters: usize,
    pub clip_length_frames: usize,
    /// 4D iterations per clip; defaults to an even share of what is left
    /// after warm-up.
    pub iters_per_clip: Option<usize>,
    pub field_lr_start: f64,
    pub field_lr_end: f64,
    /// Field MLP weights step at the field rate times this; planes use the
    /// field rate itself.
    pub field_mlp_lr_scale: f64,
    /// Multiplied by the scene extent.
    pub position_lr_start: f64,
    pub position_lr_end: f64,
    pub sh_lr: f64,
    /// Higher SH bands learn at `sh_lr * sh_rest_lr_scale`.
    pub sh_rest_lr_scale: f64,
    pub opacity_lr: f64,
    pub scale_lr: f64,
    pub rotation_lr: f64,
    pub sh_degree: usize,
    pub sh_increment_interval: usize,
    pub voxel_size: f64,
    pub initial_opacity: f64,
    pub densify: DensifyConfig,
    pub weights: LossWeights,
    pub field: FieldConfig,
    pub render: RenderOptions,
    pub adam: Adam,
    /// Every n-th manifest frame is held out for testing.
    pub test_every: usize,
    pub log_interval: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_iters: 50_000,
            warmup_iters: 5000,
            clip_length_frames: 50,
            iters_per_clip: None,
            field_lr_start: 1.6e-3,
            field_lr_end: 1.6e-4,
            field_mlp_lr_scale: 1.0,
            position_lr_start: 1.6e-4,
            position_lr_end: 1.6e-6,
            sh_lr: 2.5e-3,
            sh_rest_lr_scale: 0.05,
            opacity_lr: 5e-2,
            scale_lr: 5e-3,
            rotation_lr: 1e-3,
            sh_degree: 3,
            sh_increment_interval: 1000,
            voxel_size: 0.15,
            initial_opacity: 0.1,
            densify: DensifyConfig::default(),
            weights: LossWeights::default(),
            field: FieldConfig::default(),
            render: RenderOptions::default(),
            adam: Adam::default(),
            test_every: 10,
            log_interval: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.total_iters > 0 && self.warmup_iters >= self.total_iters {
            return bad("warmup_iters must be smaller than total_iters");
        }
        if self.total_iters == 0 && self.warmup_iters > 0 {
            return bad("warmup_iters must be 0 when total_iters is 0");
        }
        if self.clip_length_frames < 2 {
            return bad("clip_length_frames must be at least 2");
        }
        let lrs = [
            self.field_lr_start,
            self.field_lr_end,
            self.field_mlp_lr_scale,
            self.position_lr_start,
            self.position_lr_end,
            self.sh_lr,
            self.sh_rest_lr_scale,
            self.opacity_lr,
            self.scale_lr,
            self.rotation_lr,
        ];
        if lrs.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("learning rates must be finite and non-negative");
        }
        if self.sh_degree > 3 {
            return bad("sh_degree must be at most 3");
        }
        if self.sh_increment_interval == 0 || self.log_interval == 0 || self.densify.interval == 0 {
            return bad("intervals must be positive");
        }
        if self.test_every < 2 {
            return bad("test_every must be at least 2");
        }
        if !(self.voxel_size > 0.0) || !(self.initial_opacity > 0.0 && self.initial_opacity < 1.0) {
            return bad("voxel_size must be positive and initial_opacity in (0, 1)");
        }
        let a = &self.adam;
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps >= 0.0) {
            return bad("adam betas must lie in [0, 1) and eps must be non-negative");
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.field.validate().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    /// Last iteration (exclusive) at which densification may run.
    pub fn densify_until(&self) -> usize {
        let d = &self.densify;
        if d.reference_iters == 0 {
            return d.until;
        }
        ((d.until as f64) * self.total_iters as f64 / d.reference_iters as f64).round() as usize
    }

    /// Sets the iteration budget, scaling the warm-up share with it.
    pub fn with_total_iters(mut self, total: usize) -> Self {
        if self.total_iters > 0 {
            self.warmup_iters = (self.warmup_iters as u128 * total as u128 / self.total_iters as u128) as usize;
        } else {
            self.warmup_iters = 0;
        }
        if total > 0 && self.warmup_iters >= total {
            self.warmup_iters = total - 1;
        }
        self.total_iters = total;
        self
    }
}

/// Consecutive clips of at most `clip_len` manifest frames.
pub fn clip_ranges(sequence_len: usize, clip_len: usize) -> Vec<Range<usize>> {
    let clip_len = clip_len.max(1);
    (0..sequence_len.div_ceil(clip_len))
        .map(|k| k * clip_len..((k + 1) * clip_len).min(sequence_len))
        .collect()
}

/// A training frame with its pixels in memory.
#[derive(Clone, Debug)]
pub struct TrainFrame {
    /// Manifest index.
    pub index: usize,
    pub time: f64,
    pub camera: CameraModel,
    pub data: FrameData,
}

pub fn load_frames(ds: &SceneDataset) -> Result<Vec<TrainFrame>> {
    (0..ds.len())
        .into_par_iter()
        .map(|i| {
            let f = &ds.frames[i];
            Ok(TrainFrame {
                index: f.index,
                time: f.time,
                camera: f.entry.camera.clone(),
                data: ds.load_frame(i)?,
            })
        })
        .collect()
}

/// One structured log line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub phase: String,
    pub clip: Option<usize>,
    pub frame: usize,
    pub terms: LossTerms,
    pub total: f64,
    /// PSNR of the sampled training frame before the update.
    pub psnr: f64,
    pub gaussians: usize,
    pub lr_position: f64,
    pub lr_field: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipReport {
    pub clip: usize,
    pub frames: Range<usize>,
    pub iterations: usize,
    /// Field parameters at the start and end of the clip.
    pub start_params: Vec<f64>,
    pub end_params: Vec<f64>,
}

/// Owns the model and optimizer state of one training run.
pub struct Trainer {
    config: TrainConfig,
    frames: Vec<TrainFrame>,
    sequence_times: Vec<f64>,
    scene: GaussianSet,
    field: Option<HexPlaneField>,
    gauss_opt: GaussianOptimizer,
    field_opt: Option<AdamState>,
    rng: ChaCha8Rng,
    iteration: usize,
    extent: f64,
    grad_accum: Vec<f64>,
    grad_count: Vec<u32>,
    history: Vec<LogRecord>,
    sink: Option<Box<dyn Write + Send>>,
}

/// Half the diagonal of the camera centres' bounding sphere, 3DGS style.
fn camera_extent(frames: &[TrainFrame]) -> f64 {
    let n = frames.len() as f64;
    let mut mean = [0.0; 3];
    for f in frames {
        let c = f.camera.center();
        for a in 0..3 {
            mean[a] += c[a] / n;
        }
    }
    let r = frames
        .iter()
        .map(|f| {
            let c = f.camera.center();
            ((c[0] - mean[0]).powi(2) + (c[1] - mean[1]).powi(2) + (c[2] - mean[2]).powi(2)).sqrt()
        })
        .fold(0.0, f64::max);
    (r * 1.1).max(1e-6)
}

impl Trainer {
    /// Initializes Gaussians from `points`. `sequence_times` holds the
    /// normalized time of every manifest frame (training or not).
    pub fn new(config: TrainConfig, frames: Vec<TrainFrame>, sequence_times: Vec<f64>, points: &[[f64; 3]]) -> Result<Self> {
        config.validate()?;
        if frames.is_empty() {
            return Err(Error::invalid("no training frames"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let cameras: Vec<CameraModel> = frames.iter().map(|f| f.camera.clone()).collect();
        let opts = InitOptions {
            voxel_size: config.voxel_size,
            sh_degree: config.sh_degree,
            initial_opacity: config.initial_opacity,
        };
        let scene = init_from_points(points, &cameras, &opts, &mut rng)?;
        Self::with_scene(config, frames, sequence_times, scene, rng)
    }

    /// Starts from an existing canonical set.
    pub fn from_scene(config: TrainConfig, frames: Vec<TrainFrame>, sequence_times: Vec<f64>, scene: GaussianSet) -> Result<Self> {
        config.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(config.seed);
        Self::with_scene(config, frames, sequence_times, scene, rng)
    }

    fn with_scene(
        config: TrainConfig,
        frames: Vec<TrainFrame>,
        sequence_times: Vec<f64>,
        scene: GaussianSet,
        rng: ChaCha8Rng,
    ) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::invalid("no training frames"));
        }
        scene.validate()?;
        if scene.sh_degree != config.sh_degree {
            return Err(Error::invalid("scene SH degree differs from the configuration"));
        }
        for f in &frames {
            if f.data.features.is_some() && f.data.feature_dim != config.field.semantic_dim {
                return Err(Error::invalid(format!(
                    "frame {} has {} feature channels, the field predicts {}",
                    f.index, f.data.feature_dim, config.field.semantic_dim
                )));
            }
            if f.index >= sequence_times.len() {
                return Err(Error::invalid(format!("frame {} lies outside the sequence", f.index)));
            }
        }
        let extent = camera_extent(&frames);
        let n = scene.len();
        Ok(Self {
            gauss_opt: GaussianOptimizer::new(&scene),
            config,
            frames,
            sequence_times,
            scene,
            field: None,
            field_opt: None,
            rng,
            iteration: 0,
            extent,
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
            history: Vec::new(),
            sink: None,
        })
    }

    /// Loads the training split of `dataset` (every `test_every`-th frame
    /// held out) and initializes from its point cloud.
    pub fn from_dataset(config: TrainConfig, dataset: &SceneDataset) -> Result<Self> {
        let points = dataset
            .points
            .clone()
            .ok_or_else(|| Error::invalid("the dataset has no point cloud to initialize from"))?;
        let (train, _) = crate::data::split_train_test(dataset, config.test_every)?;
        let frames = load_frames(&train)?;
        Self::new(config, frames, dataset.sequence_times(), &points)
    }

    /// JSON lines are written here every `log_interval` iterations.
    pub fn set_log_sink(&mut self, sink: Box<dyn Write + Send>) {
        self.sink = Some(sink);
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn scene(&self) -> &GaussianSet {
        &self.scene
    }

    pub fn field(&self) -> Option<&HexPlaneField> {
        self.field.as_ref()
    }

    pub fn frames(&self) -> &[TrainFrame] {
        &self.frames
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn history(&self) -> &[LogRecord] {
        &self.history
    }

    pub fn extent(&self) -> f64 {
        self.extent
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.scene.clone(), self.field.clone());
        ck.meta = serde_json::json!({
            "iteration": self.iteration,
            "seed": self.config.seed,
            "config": self.config,
        });
        ck
    }

    /// Static 3DGS optimization for `warmup_iters` iterations; the field
    /// does not exist yet so nothing can perturb it.
    pub fn warmup(&mut self) -> Result<()> {
        let n = self.config.warmup_iters;
        self.train_static(n)
    }

    /// `iters` static iterations over all training frames.
    pub fn train_static(&mut self, iters: usize) -> Result<()> {
        if self.field.is_some() {
            return Err(Error::State("static training after the field was created".into()));
        }
        let all: Vec<usize> = (0..self.frames.len()).collect();
        for _ in 0..iters {
            let pick = all[self.rng.random_range(0..all.len())];
            self.step(pick, None, 0.0)?;
        }
        Ok(())
    }

    /// Creates the field over the canonical Gaussians' bounding box and the
    /// whole sequence's time span.
    pub fn start_field(&mut self) -> Result<()> {
        if self.field.is_some() {
            return Err(Error::State("the field already exists".into()));
        }
        let (t0, t1) = self.time_span(0..self.sequence_times.len());
        let bounds = SceneBounds::around(&self.scene.positions, t0, t1)?;
        // Independent stream so the field draw does not shift frame sampling.
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(1);
        let field = HexPlaneField::new(self.config.field.clone(), &bounds, self.config.sh_degree, &mut rng)?;
        self.field_opt = Some(AdamState::new(field.param_count()));
        self.field = Some(field);
        Ok(())
    }

    fn time_span(&self, frames: Range<usize>) -> (f64, f64) {
        let ts = &self.sequence_times[frames];
        let t0 = ts.iter().copied().fold(f64::INFINITY, f64::min);
        let mut t1 = ts.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if t1 <= t0 {
            t1 = t0 + 1e-6;
        }
        (t0, t1)
    }

    /// Joint training on the training frames whose manifest index lies in
    /// `clip`. The field's time range is set to the clip's span.
    pub fn train_clip(&mut self, clip_id: usize, clip: Range<usize>, iters: usize) -> Result<()> {
        let members: Vec<usize> = (0..self.frames.len())
            .filter(|&i| clip.contains(&self.frames[i].index))
            .collect();
        if members.is_empty() {
            return Err(Error::invalid(format!("clip {clip_id} holds no training frames")));
        }
        let (t0, t1) = self.time_span(clip.clone());
        self.field
            .as_mut()
            .ok_or_else(|| Error::State("train_clip needs a field; call start_field first".into()))?
            .set_time_range(t0, t1)?;
        for k in 0..iters {
            let pick = members[self.rng.random_range(0..members.len())];
            let lr = exp_decay(self.config.field_lr_start, self.config.field_lr_end, k as f64 / iters.max(1) as f64);
            self.step(pick, Some(clip_id), lr)?;
        }
        Ok(())
    }

    /// Trains every clip in turn; each clip's field starts from the previous
    /// clip's final parameters. `on_clip` sees the trainer after each clip.
    pub fn chain_clips(&mut self, mut on_clip: impl FnMut(&Trainer, &ClipReport) -> Result<()>) -> Result<Vec<ClipReport>> {
        let ranges = clip_ranges(self.sequence_times.len(), self.config.clip_length_frames);
        let remaining = self.config.total_iters.saturating_sub(self.config.warmup_iters);
        let per_clip = self.config.iters_per_clip.unwrap_or(remaining / ranges.len().max(1));
        let mut reports = Vec::new();
        for (k, r) in ranges.into_iter().enumerate() {
            let has_frames = self.frames.iter().any(|f| r.contains(&f.index));
            if !has_frames {
                continue;
            }
            let start_params = self.field.as_ref().map(|f| f.params().to_vec()).unwrap_or_default();
            self.train_clip(k, r.clone(), per_clip)?;
            let report = ClipReport {
                clip: k,
                frames: r,
                iterations: per_clip,
                start_params,
                end_params: self.field.as_ref().map(|f| f.params().to_vec()).unwrap_or_default(),
            };
            on_clip(self, &report)?;
            reports.push(report);
        }
        Ok(reports)
    }

    /// Warm-up, field creation and clip chaining.
    pub fn run(&mut self, on_clip: impl FnMut(&Trainer, &ClipReport) -> Result<()>) -> Result<Vec<ClipReport>> {
        self.warmup()?;
        self.start_field()?;
        self.chain_clips(on_clip)
    }

    fn gaussian_lrs(&self) -> GaussianLrs {
        let c = &self.config;
        let progress = if c.total_iters == 0 {
            0.0
        } else {
            self.iteration as f64 / c.total_iters as f64
        };
        GaussianLrs {
            position: exp_decay(c.position_lr_start * self.extent, c.position_lr_end * self.extent, progress),
            sh_dc: c.sh_lr,
            sh_rest: c.sh_lr * c.sh_rest_lr_scale,
            opacity: c.opacity_lr,
            scale: c.scale_lr,
            rotation: c.rotation_lr,
        }
    }

    /// One optimization step on training frame `pick`.
    fn step(&mut self, pick: usize, clip: Option<usize>, field_lr: f64) -> Result<()> {
        let it = self.iteration;
        self.scene.active_sh_degree = (it / self.config.sh_increment_interval).min(self.scene.sh_degree);
        let w = self.config.weights;
        let frame = &self.frames[pick];
        let (width, height) = (frame.data.width, frame.data.height);
        let use_field = self.field.is_some();

        let (deformed, tape) = match &self.field {
            Some(f) => {
                let (d, t) = f.deform(&self.scene, frame.time)?;
                (d, Some(t))
            }
            None => (DeformedGaussians::from_static(&self.scene, self.config.field.semantic_dim), None),
        };
        let (out, record) = render(&deformed, &frame.camera, &self.config.render)?;

        let mut terms = LossTerms::default();
        let (l1, g_l1) = l1_rgb_grad(&out.rgb, &frame.data.rgb)?;
        terms.rgb = l1;
        let (s, g_s) = ssim_grad(&out.rgb, &frame.data.rgb, width, height, 3)?;
        terms.ssim = 1.0 - s;
        let mut grads = ImageGrads {
            rgb: g_l1.iter().zip(&g_s).map(|(a, b)| w.rgb * a - w.ssim * b).collect(),
            ..ImageGrads::default()
        };
        if !frame.data.depth.is_empty() {
            let (d, g) = depth_l2_grad(&out.depth, width, height, &frame.data.depth)?;
            terms.depth = d;
            grads.depth = g.into_iter().map(|v| w.depth * v).collect();
        }
        // Semantic features come from the field, so they are supervised only
        // once it exists.
        if let (true, Some(target)) = (use_field, &frame.data.features) {
            let (f, g) = feat_l2_grad(&out.semantic, target)?;
            terms.feat = f;
            grads.semantic = g.into_iter().map(|v| w.feat * v).collect();
        }
        let frame_psnr = psnr(&out.rgb, &frame.data.rgb)?;
        let mut gg = render_backward(&record, &deformed, &grads)?;

        let mut field_grads = None;
        if let (Some(f), Some(tape)) = (&self.field, &tape) {
            let (rx, rc) = reg_offsets(&tape.offsets, &tape.color_offsets);
            terms.reg_x = rx;
            terms.reg_c = rc;
            let reg_x: Vec<f64> = reg_offsets_grad(&tape.offsets).into_iter().map(|v| w.reg_x * v).collect();
            let reg_c: Vec<f64> = reg_offsets_grad(&tape.color_offsets).into_iter().map(|v| w.reg_c * v).collect();
            let up_pos: Vec<f64> = gg.positions.iter().zip(&reg_x).map(|(a, b)| a + b).collect();
            let up_sh: Vec<f64> = gg.sh_coeffs.iter().zip(&reg_c).map(|(a, b)| a + b).collect();
            let fg = f.backward(tape, &up_pos, &up_sh, &gg.semantic)?;
            let mut params = fg.params;
            terms.tv = f.tv_backward(w.tv, &mut params);
            // The offset penalty acts on the field output only, not on the
            // canonical positions that pass straight through.
            gg.positions = fg.positions.iter().zip(&reg_x).map(|(a, b)| a - b).collect();
            field_grads = Some(params);
        }

        let breakdown = total_loss(&terms, &w).map_err(|e| match e {
            Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss {
                term,
                iteration: Some(it),
            },
            other => other,
        })?;

        let lrs = self.gaussian_lrs();
        if let (Some(f), Some(opt), Some(g)) = (&mut self.field, &mut self.field_opt, &field_grads) {
            let mlp_len = f.layout().mlp_len;
            let mlp_lr = field_lr * self.config.field_mlp_lr_scale;
            opt.step_with(f.params_mut(), g, &self.config.adam, |i| if i < mlp_len { mlp_lr } else { field_lr })?;
        }
        self.gauss_opt.step(&mut self.scene, &gg, &lrs, &self.config.adam)?;
        self.scene.validate()?;
        self.accumulate_densify_stats(&gg);
        self.iteration += 1;

        if it % self.config.log_interval == 0 || self.iteration == self.config.total_iters {
            let rec = LogRecord {
                iteration: it,
                phase: if use_field { "clip" } else { "static" }.into(),
                clip,
                frame: self.frames[pick].index,
                terms,
                total: breakdown.total,
                psnr: frame_psnr,
                gaussians: self.scene.len(),
                lr_position: lrs.position,
                lr_field: use_field.then_some(field_lr),
            };
            if let Some(sink) = &mut self.sink {
                writeln!(sink, "{}", serde_json::to_string(&rec)?)?;
            }
            self.history.push(rec);
        }
        self.maybe_densify()
    }

    fn accumulate_densify_stats(&mut self, g: &GaussianGrads) {
        for i in 0..self.grad_accum.len() {
            if g.visible[i] {
                self.grad_accum[i] += g.mean2d_norm[i];
                self.grad_count[i] += 1;
            }
        }
    }

    fn maybe_densify(&mut self) -> Result<()> {
        let it = self.iteration;
        let d = self.config.densify.clone();
        if it >= self.config.densify_until() {
            return Ok(());
        }
        if it > d.start && it % d.interval == 0 {
            let avg: Vec<f64> = self
                .grad_accum
                .iter()
                .zip(&self.grad_count)
                .map(|(a, c)| if *c > 0 { a / *c as f64 } else { 0.0 })
                .collect();
            let opts = DensifyOptions {
                grad_threshold: d.grad_threshold,
                percent_dense: d.percent_dense,
                scene_extent: self.extent,
                min_opacity: d.min_opacity,
                max_world_size: (it > d.opacity_reset_interval).then_some(0.1 * self.extent),
                max_gaussians: d.max_gaussians,
                ..DensifyOptions::default()
            };
            let outcome = densify_and_prune(&self.scene, &avg, &opts, &mut self.rng);
            if outcome.scene.is_empty() {
                return Err(Error::State(format!("densification at iteration {it} removed every Gaussian")));
            }
            self.gauss_opt = self.gauss_opt.remap(&outcome.origins);
            self.scene = outcome.scene;
            let n = self.scene.len();
            self.grad_accum = vec![0.0; n];
            self.grad_count = vec![0; n];
        }
        if d.opacity_reset_interval > 0 && it % d.opacity_reset_interval == 0 {
            reset_opacity(&mut self.scene, 0.01);
            self.gauss_opt.reset_opacity_moments();
        }
        Ok(())
    }
}
