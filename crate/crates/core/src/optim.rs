//! Adam with per-group moments, plus the bookkeeping that keeps Gaussian
//! moments aligned through densification.

use serde::{Deserialize, Serialize};

use crate::render::GaussianGrads;
use crate::scene::{GaussianSet, Origin};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for Adam {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-15,
        }
    }
}

/// Moments for one parameter array.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One bias-corrected update with a single learning rate.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, cfg: &Adam) -> Result<()> {
        self.step_with(params, grads, cfg, |_| lr)
    }

    /// One update where element `i` uses learning rate `lr(i)`.
    pub fn step_with(&mut self, params: &mut [f64], grads: &[f64], cfg: &Adam, lr: impl Fn(usize) -> f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::invalid(format!(
                "adam: {} parameters, {} gradients, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.step as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.step as i32);
        for (i, ((p, g), (m, v))) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
            .enumerate()
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr(i) * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        Ok(())
    }

    /// Rebuilds per-Gaussian moments (`stride` values each) after
    /// densification: survivors keep theirs, new Gaussians start at zero.
    pub fn remap(&self, origins: &[Origin], stride: usize) -> Self {
        let mut out = Self::new(origins.len() * stride);
        out.step = self.step;
        for (new, o) in origins.iter().enumerate() {
            if let Some(old) = o.carried() {
                out.m[new * stride..(new + 1) * stride].copy_from_slice(&self.m[old * stride..(old + 1) * stride]);
                out.v[new * stride..(new + 1) * stride].copy_from_slice(&self.v[old * stride..(old + 1) * stride]);
            }
        }
        out
    }
}

/// Learning rates of the canonical Gaussian attributes for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianLrs {
    pub position: f64,
    pub sh_dc: f64,
    pub sh_rest: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

/// Adam moments for every attribute of a [`GaussianSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianOptimizer {
    pub positions: AdamState,
    pub log_scales: AdamState,
    pub rotations: AdamState,
    pub opacity_logits: AdamState,
    pub sh_coeffs: AdamState,
    sh_stride: usize,
}

impl GaussianOptimizer {
    pub fn new(scene: &GaussianSet) -> Self {
        let n = scene.len();
        Self {
            positions: AdamState::new(n * 3),
            log_scales: AdamState::new(n * 3),
            rotations: AdamState::new(n * 4),
            opacity_logits: AdamState::new(n),
            sh_coeffs: AdamState::new(n * scene.sh_stride()),
            sh_stride: scene.sh_stride(),
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    /// Updates every attribute and renormalizes the quaternions.
    pub fn step(&mut self, scene: &mut GaussianSet, grads: &GaussianGrads, lrs: &GaussianLrs, cfg: &Adam) -> Result<()> {
        if scene.len() != self.len() {
            return Err(Error::State(format!(
                "optimizer tracks {} Gaussians but the scene has {}",
                self.len(),
                scene.len()
            )));
        }
        self.positions.step(&mut scene.positions, &grads.positions, lrs.position, cfg)?;
        self.log_scales.step(&mut scene.log_scales, &grads.log_scales, lrs.scale, cfg)?;
        self.rotations.step(&mut scene.rotations, &grads.rotations, lrs.rotation, cfg)?;
        self.opacity_logits.step(&mut scene.opacity_logits, &grads.opacity_logits, lrs.opacity, cfg)?;
        // DC occupies the first three entries of each Gaussian's block.
        let stride = self.sh_stride;
        self.sh_coeffs.step_with(&mut scene.sh_coeffs, &grads.sh_coeffs, cfg, |i| {
            if i % stride < 3 {
                lrs.sh_dc
            } else {
                lrs.sh_rest
            }
        })?;
        scene.normalize_rotations();
        Ok(())
    }

    pub fn remap(&self, origins: &[Origin]) -> Self {
        Self {
            positions: self.positions.remap(origins, 3),
            log_scales: self.log_scales.remap(origins, 3),
            rotations: self.rotations.remap(origins, 4),
            opacity_logits: self.opacity_logits.remap(origins, 1),
            sh_coeffs: self.sh_coeffs.remap(origins, self.sh_stride),
            sh_stride: self.sh_stride,
        }
    }

    /// Clears the opacity moments (used after an opacity reset).
    pub fn reset_opacity_moments(&mut self) {
        self.opacity_logits.m.fill(0.0);
        self.opacity_logits.v.fill(0.0);
    }
}

/// `start * (end / start)^progress`, clamped to `progress` in `[0, 1]`.
pub fn exp_decay(start: f64, end: f64, progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    if start <= 0.0 || end <= 0.0 {
        return start + (end - start) * p;
    }
    (start.ln() * (1.0 - p) + end.ln() * p).exp()
}
