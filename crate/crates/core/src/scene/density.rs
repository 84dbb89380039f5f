use rand::Rng;
use rand_distr::StandardNormal;

use super::GaussianSet;
use crate::math::{logit, quat_to_rotmat, sigmoid, Vec3};

/// Adaptive density control thresholds (3DGS defaults).
#[derive(Clone, Debug)]
pub struct DensifyOptions {
    /// Mean view-space position-gradient norm that triggers densification.
    pub grad_threshold: f64,
    /// Gaussians smaller than `percent_dense * scene_extent` are cloned,
    /// larger ones split.
    pub percent_dense: f64,
    pub scene_extent: f64,
    pub min_opacity: f64,
    /// Scale divisor applied to both children of a split.
    pub split_scale_divisor: f64,
    /// Prune Gaussians whose largest axis exceeds this many meters.
    pub max_world_size: Option<f64>,
    /// Upper bound on the set size after densification. When more
    /// Gaussians qualify than the budget allows, those with the largest
    /// gradients are densified first.
    pub max_gaussians: Option<usize>,
}

impl Default for DensifyOptions {
    fn default() -> Self {
        Self {
            grad_threshold: 0.0002,
            percent_dense: 0.01,
            scene_extent: 1.0,
            min_opacity: 0.005,
            split_scale_divisor: 1.6,
            max_world_size: None,
            max_gaussians: None,
        }
    }
}

/// Where each Gaussian of a densified set came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Origin {
    /// Survived unchanged from the given old index.
    Kept(usize),
    /// Fresh copy of the given old Gaussian.
    Cloned(usize),
    /// One of the two children of a split Gaussian.
    Split(usize),
}

impl Origin {
    /// The old index whose optimizer moments carry over, if any.
    pub fn carried(&self) -> Option<usize> {
        match *self {
            Origin::Kept(i) => Some(i),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DensifyOutcome {
    pub scene: GaussianSet,
    pub origins: Vec<Origin>,
}

/// Clone, split and prune according to accumulated gradient statistics.
pub fn densify_and_prune<R: Rng>(
    scene: &GaussianSet,
    grad_accum: &[f64],
    opts: &DensifyOptions,
    rng: &mut R,
) -> DensifyOutcome {
    assert_eq!(grad_accum.len(), scene.len(), "gradient statistics do not match scene size");
    let size_limit = opts.percent_dense * opts.scene_extent;
    let stride = scene.sh_stride();

    let mut selected = vec![false; scene.len()];
    let mut candidates: Vec<usize> = (0..scene.len())
        .filter(|&i| grad_accum[i] > opts.grad_threshold && grad_accum[i].is_finite())
        .collect();
    if let Some(cap) = opts.max_gaussians {
        // Clones and splits both add one Gaussian net.
        candidates.sort_by(|&a, &b| grad_accum[b].total_cmp(&grad_accum[a]).then(a.cmp(&b)));
        candidates.truncate(cap.saturating_sub(scene.len()));
    }
    for i in candidates {
        selected[i] = true;
    }

    let mut kept = Vec::new();
    let mut cloned = Vec::new();
    let mut split = Vec::new();
    for i in 0..scene.len() {
        let max_scale = scene.log_scale(i).map(f64::exp).max();
        if selected[i] {
            if max_scale < size_limit {
                kept.push(i);
                cloned.push(i);
            } else {
                split.push(i);
            }
        } else {
            kept.push(i);
        }
    }

    let mut out = scene.select(&kept);
    let mut origins: Vec<Origin> = kept.iter().map(|&i| Origin::Kept(i)).collect();
    for &i in &cloned {
        out.push(
            scene.position(i).into(),
            scene.log_scale(i).into(),
            scene.rotation(i).into(),
            scene.opacity_logits[i],
            &scene.sh_coeffs[stride * i..stride * (i + 1)],
        );
        origins.push(Origin::Cloned(i));
    }
    let shrink = opts.split_scale_divisor.ln();
    for &i in &split {
        let scales = scene.log_scale(i).map(f64::exp);
        let rot = quat_to_rotmat(&scene.rotation(i).normalize());
        let center = scene.position(i);
        for _ in 0..2 {
            let sample = Vec3::new(
                rng.sample::<f64, _>(StandardNormal) * scales.x,
                rng.sample::<f64, _>(StandardNormal) * scales.y,
                rng.sample::<f64, _>(StandardNormal) * scales.z,
            );
            let p = center + rot * sample;
            out.push(
                p.into(),
                scene.log_scale(i).map(|l| l - shrink).into(),
                scene.rotation(i).into(),
                scene.opacity_logits[i],
                &scene.sh_coeffs[stride * i..stride * (i + 1)],
            );
            origins.push(Origin::Split(i));
        }
    }

    let survivors: Vec<usize> = (0..out.len())
        .filter(|&j| {
            let too_faint = out.opacity(j) < opts.min_opacity;
            let too_big = opts
                .max_world_size
                .is_some_and(|m| out.log_scale(j).map(f64::exp).max() > m);
            !(too_faint || too_big)
        })
        .collect();
    if survivors.len() == out.len() {
        return DensifyOutcome { scene: out, origins };
    }
    DensifyOutcome {
        scene: out.select(&survivors),
        origins: survivors.iter().map(|&j| origins[j]).collect(),
    }
}

/// Clamps every opacity to at most `ceiling`.
pub fn reset_opacity(scene: &mut GaussianSet, ceiling: f64) {
    let cap = logit(ceiling);
    for l in scene.opacity_logits.iter_mut() {
        if sigmoid(*l) > ceiling {
            *l = cap;
        }
    }
}
