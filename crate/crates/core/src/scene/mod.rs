//! Canonical Gaussian scene: storage, covariance assembly, SH colour,
//! point-cloud initialization and adaptive density control.

mod density;
mod init;
pub mod pointcloud;
pub mod sh;

pub use density::{densify_and_prune, reset_opacity, DensifyOptions, DensifyOutcome, Origin};
pub use init::{init_from_points, voxel_downsample, InitOptions};
pub use sh::{eval_sh, sh_basis, sh_basis_len};

use nalgebra::{Matrix3, Vector4};

use crate::error::{Error, Result};
use crate::math::{quat_to_rotmat, sigmoid, Mat3, Vec3};

/// Canonical, time-independent Gaussian set.
///
/// All attributes are stored as flat row-major arrays sharing the leading
/// dimension `N`. SH coefficients are laid out per Gaussian as
/// `[basis][channel]`, i.e. `3 * (k + 1)^2` values.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianSet {
    pub positions: Vec<f64>,
    pub log_scales: Vec<f64>,
    /// Quaternions as `(w, x, y, z)`.
    pub rotations: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
    pub sh_degree: usize,
    pub active_sh_degree: usize,
}

impl GaussianSet {
    /// An empty set with room for SH of degree `sh_degree`.
    pub fn empty(sh_degree: usize) -> Self {
        Self {
            positions: Vec::new(),
            log_scales: Vec::new(),
            rotations: Vec::new(),
            opacity_logits: Vec::new(),
            sh_coeffs: Vec::new(),
            sh_degree,
            active_sh_degree: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    /// Number of SH values per Gaussian (`3 (k+1)^2`).
    pub fn sh_stride(&self) -> usize {
        3 * sh_basis_len(self.sh_degree)
    }

    pub fn position(&self, i: usize) -> Vec3 {
        Vec3::from_column_slice(&self.positions[3 * i..3 * i + 3])
    }

    pub fn rotation(&self, i: usize) -> Vector4<f64> {
        Vector4::from_column_slice(&self.rotations[4 * i..4 * i + 4])
    }

    pub fn log_scale(&self, i: usize) -> Vec3 {
        Vec3::from_column_slice(&self.log_scales[3 * i..3 * i + 3])
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn sh(&self, i: usize) -> &[f64] {
        let s = self.sh_stride();
        &self.sh_coeffs[s * i..s * (i + 1)]
    }

    /// Appends one Gaussian. `sh` must hold `sh_stride()` values.
    pub fn push(&mut self, position: [f64; 3], log_scale: [f64; 3], rotation: [f64; 4], opacity_logit: f64, sh: &[f64]) {
        debug_assert_eq!(sh.len(), self.sh_stride());
        self.positions.extend_from_slice(&position);
        self.log_scales.extend_from_slice(&log_scale);
        self.rotations.extend_from_slice(&rotation);
        self.opacity_logits.push(opacity_logit);
        self.sh_coeffs.extend_from_slice(sh);
    }

    /// Keeps only the Gaussians whose index appears in `keep` (in that order).
    pub fn select(&self, keep: &[usize]) -> Self {
        let mut out = Self::empty(self.sh_degree);
        out.active_sh_degree = self.active_sh_degree;
        let s = self.sh_stride();
        for &i in keep {
            out.positions.extend_from_slice(&self.positions[3 * i..3 * i + 3]);
            out.log_scales.extend_from_slice(&self.log_scales[3 * i..3 * i + 3]);
            out.rotations.extend_from_slice(&self.rotations[4 * i..4 * i + 4]);
            out.opacity_logits.push(self.opacity_logits[i]);
            out.sh_coeffs.extend_from_slice(&self.sh_coeffs[s * i..s * (i + 1)]);
        }
        out
    }

    /// Renormalizes every quaternion in place.
    pub fn normalize_rotations(&mut self) {
        for q in self.rotations.chunks_exact_mut(4) {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 0.0 {
                q.iter_mut().for_each(|v| *v /= n);
            } else {
                q.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
            }
        }
    }

    /// Checks the structural invariants and that every value is finite.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.positions.len() != 3 * n
            || self.log_scales.len() != 3 * n
            || self.rotations.len() != 4 * n
            || self.sh_coeffs.len() != self.sh_stride() * n
        {
            return Err(Error::invalid("gaussian attribute arrays disagree on N"));
        }
        if self.active_sh_degree > self.sh_degree {
            return Err(Error::invalid("active SH degree exceeds the stored degree"));
        }
        check_finite("position", &self.positions, 3)?;
        check_finite("log_scale", &self.log_scales, 3)?;
        check_finite("rotation", &self.rotations, 4)?;
        check_finite("opacity", &self.opacity_logits, 1)?;
        check_finite("sh", &self.sh_coeffs, self.sh_stride())?;
        Ok(())
    }

    /// Largest axis of the set's bounding box measured from its centroid.
    pub fn extent(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let n = self.len() as f64;
        let mut c = Vec3::zeros();
        for p in self.positions.chunks_exact(3) {
            c += Vec3::new(p[0], p[1], p[2]) / n;
        }
        self.positions
            .chunks_exact(3)
            .map(|p| (Vec3::new(p[0], p[1], p[2]) - c).norm())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn check_finite(attribute: &'static str, values: &[f64], stride: usize) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(k) => Err(Error::NonFiniteAttribute {
            attribute,
            index: k / stride.max(1),
        }),
        None => Ok(()),
    }
}

/// Time-conditioned Gaussians ready for rendering.
///
/// Only positions and SH coefficients carry field offsets; the remaining
/// geometric attributes are copied from the canonical set.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformedGaussians {
    pub positions: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    /// Per-Gaussian semantic features, `N x semantic_dim`.
    pub semantic: Vec<f64>,
    pub semantic_dim: usize,
    pub sh_degree: usize,
    pub active_sh_degree: usize,
}

impl DeformedGaussians {
    /// The canonical set rendered as-is, with zero semantic features.
    pub fn from_static(scene: &GaussianSet, semantic_dim: usize) -> Self {
        Self {
            positions: scene.positions.clone(),
            sh_coeffs: scene.sh_coeffs.clone(),
            log_scales: scene.log_scales.clone(),
            rotations: scene.rotations.clone(),
            opacity_logits: scene.opacity_logits.clone(),
            semantic: vec![0.0; scene.len() * semantic_dim],
            semantic_dim,
            sh_degree: scene.sh_degree,
            active_sh_degree: scene.active_sh_degree,
        }
    }

    pub fn len(&self) -> usize {
        self.opacity_logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity_logits.is_empty()
    }

    pub fn sh_stride(&self) -> usize {
        3 * sh_basis_len(self.sh_degree)
    }

    /// Keeps the Gaussians listed in `keep`.
    pub fn select(&self, keep: &[usize]) -> Self {
        let s = self.sh_stride();
        let f = self.semantic_dim;
        let gather = |src: &[f64], stride: usize| -> Vec<f64> {
            keep.iter()
                .flat_map(|&i| src[stride * i..stride * (i + 1)].iter().copied())
                .collect()
        };
        Self {
            positions: gather(&self.positions, 3),
            sh_coeffs: gather(&self.sh_coeffs, s),
            log_scales: gather(&self.log_scales, 3),
            rotations: gather(&self.rotations, 4),
            opacity_logits: gather(&self.opacity_logits, 1),
            semantic: gather(&self.semantic, f),
            semantic_dim: f,
            sh_degree: self.sh_degree,
            active_sh_degree: self.active_sh_degree,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_finite("position", &self.positions, 3)?;
        check_finite("log_scale", &self.log_scales, 3)?;
        check_finite("rotation", &self.rotations, 4)?;
        check_finite("opacity", &self.opacity_logits, 1)?;
        check_finite("sh", &self.sh_coeffs, self.sh_stride())?;
        check_finite("semantic", &self.semantic, self.semantic_dim)?;
        Ok(())
    }
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`.
///
/// The quaternion must already be unit length.
pub fn build_covariance(log_scale: [f64; 3], rotation: [f64; 4]) -> Result<Mat3> {
    if log_scale.iter().chain(rotation.iter()).any(|v| !v.is_finite()) {
        return Err(Error::invalid("non-finite covariance parameters"));
    }
    let q = Vector4::from(rotation);
    if (q.norm() - 1.0).abs() > 1e-6 {
        return Err(Error::invalid(format!(
            "rotation quaternion has norm {}, expected 1",
            q.norm()
        )));
    }
    Ok(covariance_unchecked(&Vec3::from(log_scale), &q))
}

/// Covariance from possibly unnormalized parameters; the quaternion is
/// normalized first, matching what the renderer differentiates.
pub(crate) fn covariance_unchecked(log_scale: &Vec3, rotation: &Vector4<f64>) -> Mat3 {
    let r = quat_to_rotmat(&rotation.normalize());
    let s = Matrix3::from_diagonal(&log_scale.map(f64::exp));
    let m = r * s;
    m * m.transpose()
}
