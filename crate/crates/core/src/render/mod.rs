//! Differentiable tile-based Gaussian rasterizer.
//!
//! Gaussians are projected with the EWA approximation, sorted globally by
//! camera depth (ties broken by index), binned into square tiles and
//! alpha-composited front to back. The backward pass re-traverses each
//! pixel's contributors back to front and accumulates per-tile partial
//! gradients that are reduced in a fixed tile order, so results do not
//! depend on thread scheduling.

mod backward;
mod camera;
mod image_io;
mod project;
mod raster;

pub use backward::{render_backward, GaussianGrads, ImageGrads};
pub use camera::CameraModel;
pub use image_io::{rgb_to_png_bytes, save_npy, save_rgb_png};
pub use project::{project, ProjectedGaussian};
pub use raster::{render, render_with_view_dirs, RenderOutput, RenderRecord};

use serde::{Deserialize, Serialize};

/// Renderer constants (3DGS defaults).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RenderOptions {
    pub tile_size: usize,
    /// Upper clip for per-pixel alpha.
    pub alpha_max: f64,
    /// Contributions below this alpha are skipped.
    pub alpha_min: f64,
    /// Compositing stops once transmittance would fall below this.
    pub min_transmittance: f64,
    /// Added to the diagonal of every 2D covariance (pixels²).
    pub dilation: f64,
    /// Camera-space x/y are clamped to this multiple of the half field of
    /// view before building the projection Jacobian.
    pub frustum_margin: f64,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            tile_size: 16,
            alpha_max: 0.99,
            alpha_min: 1.0 / 255.0,
            min_transmittance: 1e-4,
            dilation: 0.3,
            frustum_margin: 1.3,
        }
    }
}
