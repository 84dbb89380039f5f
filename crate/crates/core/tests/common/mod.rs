//! Shared fixtures: random scenes, a naive reference renderer and
//! finite-difference helpers.
#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use s3g_core::render::{CameraModel, RenderOptions, RenderOutput};
use s3g_core::scene::{eval_sh, DeformedGaussians, GaussianSet};

pub fn identity_camera(width: usize, height: usize, focal: f64) -> CameraModel {
    CameraModel {
        fx: focal,
        fy: focal,
        cx: width as f64 / 2.0,
        cy: height as f64 / 2.0,
        width,
        height,
        world_to_camera: [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]],
        near: 0.2,
        far: 50.0,
    }
}

/// A tilted camera looking at the origin from about 5 units away.
pub fn orbit_camera(width: usize, height: usize, rng: &mut ChaCha8Rng) -> CameraModel {
    let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let eye = Vector3::new(5.0 * a.cos(), rng.random_range(-1.5..1.5), 5.0 * a.sin());
    CameraModel::look_at(eye, Vector3::zeros(), Vector3::new(0.0, 1.0, 0.0), 0.9 * width as f64, 0.9 * height as f64, width, height, 0.5, 30.0)
}

pub struct SceneRanges {
    pub extent: f64,
    pub log_scale: (f64, f64),
    pub opacity_logit: (f64, f64),
    pub sh_degree: usize,
    pub semantic_dim: usize,
}

impl Default for SceneRanges {
    fn default() -> Self {
        Self {
            extent: 1.6,
            log_scale: (-3.5, -1.2),
            opacity_logit: (-3.0, 6.0),
            sh_degree: 2,
            semantic_dim: 3,
        }
    }
}

/// `n` Gaussians scattered in a cube around the origin with random shape,
/// opacity, colour and semantic features.
pub fn random_gaussians(n: usize, r: &SceneRanges, rng: &mut ChaCha8Rng) -> DeformedGaussians {
    let mut s = GaussianSet::empty(r.sh_degree);
    let stride = s.sh_stride();
    for _ in 0..n {
        let e = r.extent;
        let pos = [rng.random_range(-e..e), rng.random_range(-e..e), rng.random_range(-e..e)];
        let ls = [0; 3].map(|_| rng.random_range(r.log_scale.0..r.log_scale.1));
        let q = [0; 4].map(|_| rng.random_range(-1.0..1.0));
        let sh: Vec<f64> = (0..stride)
            .map(|k| if k < 3 { rng.random_range(-0.5..1.5) } else { rng.random_range(-0.3..0.3) })
            .collect();
        s.push(pos, ls, q, rng.random_range(r.opacity_logit.0..r.opacity_logit.1), &sh);
    }
    s.normalize_rotations();
    s.active_sh_degree = r.sh_degree;
    let mut d = DeformedGaussians::from_static(&s, r.semantic_dim);
    for v in &mut d.semantic {
        *v = rng.random_range(-1.0..1.0);
    }
    d
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// One Gaussian as seen by the reference renderer.
pub struct RefSplat {
    pub index: usize,
    pub depth: f64,
    pub mean: [f64; 2],
    pub inv_cov: Matrix2<f64>,
    pub opacity: f64,
    pub color: [f64; 3],
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Projects every Gaussian directly from the definitions: `Σ = R S² Rᵀ`,
/// EWA `J W Σ Wᵀ Jᵀ` with the frustum clamp and low-pass dilation, and
/// SH colour along the camera-to-mean direction (or `view_dirs`).
pub fn reference_splats(g: &DeformedGaussians, cam: &CameraModel, opts: &RenderOptions, view_dirs: Option<&[[f64; 3]]>) -> Vec<RefSplat> {
    let m = cam.world_to_camera;
    let w = Matrix3::from_fn(|i, j| m[i][j]);
    let t = Vector3::new(m[0][3], m[1][3], m[2][3]);
    let center = -(w.transpose() * t);
    let stride = g.sh_stride();
    let mut out = Vec::new();
    for i in 0..g.len() {
        let p = Vector3::from_column_slice(&g.positions[3 * i..3 * i + 3]);
        let c = w * p + t;
        if c.z <= cam.near || c.z >= cam.far {
            continue;
        }
        let r = &g.rotations[4 * i..4 * i + 4];
        let rot = UnitQuaternion::from_quaternion(Quaternion::new(r[0], r[1], r[2], r[3])).to_rotation_matrix();
        let s = Matrix3::from_diagonal(&Vector3::from_iterator(g.log_scales[3 * i..3 * i + 3].iter().map(|v| (2.0 * v).exp())));
        let sigma = rot.matrix() * s * rot.matrix().transpose();
        let lim_x = opts.frustum_margin * 0.5 * cam.width as f64 / cam.fx;
        let lim_y = opts.frustum_margin * 0.5 * cam.height as f64 / cam.fy;
        let tx = (c.x / c.z).clamp(-lim_x, lim_x) * c.z;
        let ty = (c.y / c.z).clamp(-lim_y, lim_y) * c.z;
        let z2 = c.z * c.z;
        let j = Matrix2x3::new(cam.fx / c.z, 0.0, -cam.fx * tx / z2, 0.0, cam.fy / c.z, -cam.fy * ty / z2);
        let cov = j * w * sigma * w.transpose() * j.transpose() + Matrix2::identity() * opts.dilation;
        let Some(inv_cov) = cov.try_inverse().filter(|_| cov.determinant() > 0.0) else {
            continue;
        };
        let dir = match view_dirs {
            Some(d) => d[i],
            None => {
                let v = (p - center).normalize();
                [v.x, v.y, v.z]
            }
        };
        out.push(RefSplat {
            index: i,
            depth: c.z,
            mean: [cam.fx * c.x / c.z + cam.cx, cam.fy * c.y / c.z + cam.cy],
            inv_cov,
            opacity: sigmoid(g.opacity_logits[i]),
            color: eval_sh(&g.sh_coeffs[stride * i..stride * (i + 1)], dir, g.active_sh_degree.min(g.sh_degree)),
        });
    }
    out
}

/// Unclipped `opacity · G` at the centre of pixel `(x, y)`.
pub fn raw_alpha(s: &RefSplat, x: usize, y: usize) -> f64 {
    let d = nalgebra::Vector2::new(x as f64 + 0.5 - s.mean[0], y as f64 + 0.5 - s.mean[1]);
    s.opacity * (-0.5 * (d.transpose() * s.inv_cov * d)[0]).exp()
}

/// Per-pixel full sort and front-to-back compositing with no tiling, no
/// footprint culling and no shared code with the production renderer.
pub fn naive_render(g: &DeformedGaussians, cam: &CameraModel, opts: &RenderOptions) -> RenderOutput {
    let splats = reference_splats(g, cam, opts, None);
    let (w, h, f) = (cam.width, cam.height, g.semantic_dim);
    let mut out = RenderOutput {
        width: w,
        height: h,
        rgb: vec![0.0; 3 * w * h],
        depth: vec![0.0; w * h],
        semantic: vec![0.0; f * w * h],
        semantic_dim: f,
        alpha: vec![0.0; w * h],
    };
    for y in 0..h {
        for x in 0..w {
            let mut hits: Vec<(&RefSplat, f64)> = splats
                .iter()
                .filter_map(|s| {
                    let a = raw_alpha(s, x, y);
                    (a >= opts.alpha_min).then(|| (s, a.min(opts.alpha_max)))
                })
                .collect();
            hits.sort_by(|a, b| a.0.depth.total_cmp(&b.0.depth).then(a.0.index.cmp(&b.0.index)));
            let p = y * w + x;
            let mut t = 1.0;
            for (s, a) in hits {
                if t * (1.0 - a) < opts.min_transmittance {
                    break;
                }
                let wt = a * t;
                for ch in 0..3 {
                    out.rgb[3 * p + ch] += wt * s.color[ch];
                }
                out.depth[p] += wt * s.depth;
                for k in 0..f {
                    out.semantic[f * p + k] += wt * g.semantic[f * s.index + k];
                }
                t *= 1.0 - a;
            }
            out.alpha[p] = 1.0 - t;
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Fourth-order central difference of `f` along one coordinate.
pub fn central_diff(f: impl Fn(f64) -> f64, h: f64) -> f64 {
    (8.0 * (f(h) - f(-h)) - (f(2.0 * h) - f(-2.0 * h))) / (12.0 * h)
}

pub fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
