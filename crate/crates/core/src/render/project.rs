use nalgebra::{Matrix2, Matrix2x3, Vector2};

use super::{CameraModel, RenderOptions};
use crate::math::{Mat3, Vec3};

/// A Gaussian after EWA projection into one camera.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedGaussian {
    /// Pixel-space mean.
    pub mean2d: Vector2<f64>,
    /// `J W Σ Wᵀ Jᵀ` plus the low-pass dilation.
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d` as `(a, b, c)`: `[[a, b], [b, c]]`.
    pub conic: [f64; 3],
    /// Camera-space z.
    pub depth: f64,
    pub opacity: f64,
    /// Distance (pixels) beyond which the kernel drops below the alpha floor.
    pub radius: f64,
    /// Inclusive-exclusive pixel bounds `[x0, y0, x1, y1)` the splat can touch.
    pub pixel_rect: [usize; 4],
    pub(crate) cam: Vec3,
    pub(crate) jacobian: Matrix2x3<f64>,
    /// Which of the camera-space x/y were clamped to the frustum margin.
    pub(crate) clamped: [bool; 2],
    /// Kernel exponents below this give an alpha under the floor, so the
    /// exponential can be skipped. Kept slightly loose so the exact test
    /// still decides every borderline case.
    pub(crate) power_floor: f64,
}

/// Projects one Gaussian; `None` means it was culled.
///
/// Culling happens for depth outside `(near, far)` and for splats whose
/// footprint (the radius where `opacity * kernel` reaches the alpha floor,
/// roughly 3σ) misses every pixel centre.
pub fn project(
    mean: &Vec3,
    cov: &Mat3,
    opacity: f64,
    camera: &CameraModel,
    opts: &RenderOptions,
) -> Option<ProjectedGaussian> {
    let w = camera.rotation();
    let t = w * mean + camera.translation();
    let z = t.z;
    if z <= camera.near || z >= camera.far {
        return None;
    }
    let (tan_x, tan_y) = camera.tan_half_fov();
    let lim_x = opts.frustum_margin * tan_x;
    let lim_y = opts.frustum_margin * tan_y;
    let (rx, ry) = (t.x / z, t.y / z);
    let clamped = [rx.abs() > lim_x, ry.abs() > lim_y];
    let tx = rx.clamp(-lim_x, lim_x) * z;
    let ty = ry.clamp(-lim_y, lim_y) * z;
    let jacobian = Matrix2x3::new(
        camera.fx / z,
        0.0,
        -camera.fx * tx / (z * z),
        0.0,
        camera.fy / z,
        -camera.fy * ty / (z * z),
    );
    let tmat = jacobian * w;
    let mut cov2d = tmat * cov * tmat.transpose();
    cov2d[(0, 0)] += opts.dilation;
    cov2d[(1, 1)] += opts.dilation;
    let det = cov2d.determinant();
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov2d[(1, 1)] / det, -cov2d[(0, 1)] / det, cov2d[(0, 0)] / det];

    let level = (opacity / opts.alpha_min).ln();
    if !(level > 0.0) {
        return None;
    }
    let mid = 0.5 * (cov2d[(0, 0)] + cov2d[(1, 1)]);
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    // Small pad so rounding never hides a pixel the exact test would accept.
    let radius = (2.0 * level * lambda_max).sqrt() * (1.0 + 1e-9) + 1e-6;

    let mean2d = camera.project_camera(&t);
    // Pixel centres sit at i + 0.5.
    // The ellipse's axis-aligned half extents are never larger than the
    // circumscribed radius and give tighter tile coverage.
    let half = |var: f64| ((2.0 * level * var).sqrt() * (1.0 + 1e-9) + 1e-6).min(radius);
    let span = |c: f64, r: f64, n: usize| -> Option<(usize, usize)> {
        let lo = (c - r - 0.5).ceil().max(0.0);
        let hi = (c + r - 0.5).floor().min(n as f64 - 1.0);
        (lo <= hi).then_some((lo as usize, hi as usize + 1))
    };
    let (x0, x1) = span(mean2d.x, half(cov2d[(0, 0)]), camera.width)?;
    let (y0, y1) = span(mean2d.y, half(cov2d[(1, 1)]), camera.height)?;

    Some(ProjectedGaussian {
        mean2d,
        cov2d,
        conic,
        depth: z,
        opacity,
        radius,
        pixel_rect: [x0, y0, x1, y1],
        cam: t,
        jacobian,
        clamped,
        power_floor: (opts.alpha_min / opacity).ln() - 1e-9,
    })
}
