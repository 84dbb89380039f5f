use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector4};
use rayon::prelude::*;

use super::raster::{splat_alpha, RenderRecord};
use crate::error::{Error, Result};
use crate::math::{normalize_grad, quat_to_rotmat, rotmat_grad_to_quat, sigmoid, Mat3, Vec3};
use crate::scene::sh::sh_basis_len;
use crate::scene::DeformedGaussians;

/// Upstream gradients w.r.t. the rendered images. An empty buffer stands
/// for an all-zero gradient.
#[derive(Clone, Debug, Default)]
pub struct ImageGrads {
    pub rgb: Vec<f64>,
    pub depth: Vec<f64>,
    pub semantic: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl ImageGrads {
    pub fn zeros(width: usize, height: usize, semantic_dim: usize) -> Self {
        let n = width * height;
        Self {
            rgb: vec![0.0; 3 * n],
            depth: vec![0.0; n],
            semantic: vec![0.0; semantic_dim * n],
            alpha: vec![0.0; n],
        }
    }
}

/// Gradients w.r.t. every per-Gaussian input of the renderer.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrads {
    pub positions: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub rotations: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub sh_coeffs: Vec<f64>,
    pub semantic: Vec<f64>,
    /// Norm of the pixel-mean gradient in normalized device units, the
    /// statistic adaptive density control accumulates.
    pub mean2d_norm: Vec<f64>,
    pub visible: Vec<bool>,
}

#[derive(Clone, Copy, Default)]
struct SplatGrad {
    mean2d: [f64; 2],
    /// w.r.t. conic `(a, b, c)` with power `-a dx²/2 - b dx dy - c dy²/2`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    depth: f64,
}

impl SplatGrad {
    fn add(&mut self, o: &SplatGrad) {
        for k in 0..2 {
            self.mean2d[k] += o.mean2d[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
        self.depth += o.depth;
    }
}

fn check_len(name: &str, v: &[f64], want: usize) -> Result<()> {
    if v.is_empty() || v.len() == want {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "{name} gradient has {} values, image needs {want}",
            v.len()
        )))
    }
}

/// Reverse pass of [`super::render`].
pub fn render_backward(record: &RenderRecord, deformed: &DeformedGaussians, upstream: &ImageGrads) -> Result<GaussianGrads> {
    let cam = &record.camera;
    let (w, h) = (cam.width, cam.height);
    let fdim = record.semantic_dim;
    check_len("rgb", &upstream.rgb, 3 * w * h)?;
    check_len("depth", &upstream.depth, w * h)?;
    check_len("semantic", &upstream.semantic, fdim * w * h)?;
    check_len("alpha", &upstream.alpha, w * h)?;
    if deformed.len() != record.num_gaussians || deformed.semantic_dim != fdim {
        return Err(Error::State("render record does not match the Gaussians passed to backward".into()));
    }

    let opts = &record.opts;
    let ts = opts.tile_size;
    let splats = &record.splats;
    let zero3 = [0.0; 3];

    // Per-tile partial gradients aligned with each tile list.
    let partials: Vec<(Vec<SplatGrad>, Vec<f64>)> = record
        .tile_lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let mut grads = vec![SplatGrad::default(); list.len()];
            let mut sem_grads = vec![0.0; list.len() * fdim];
            let (tx, ty) = (tile % record.tiles_x, tile / record.tiles_x);
            let mut acc_sem = vec![0.0; fdim];
            for y in ty * ts..((ty + 1) * ts).min(h) {
                for x in tx * ts..((tx + 1) * ts).min(w) {
                    let p = y * w + x;
                    let d_rgb: [f64; 3] = if upstream.rgb.is_empty() {
                        zero3
                    } else {
                        [upstream.rgb[3 * p], upstream.rgb[3 * p + 1], upstream.rgb[3 * p + 2]]
                    };
                    let d_depth = upstream.depth.get(p).copied().unwrap_or(0.0);
                    let d_alpha = upstream.alpha.get(p).copied().unwrap_or(0.0);
                    let d_sem = if upstream.semantic.is_empty() {
                        None
                    } else {
                        Some(&upstream.semantic[fdim * p..fdim * (p + 1)])
                    };
                    let t_final = record.final_t[p];
                    let mut t = t_final;
                    let mut acc_rgb = [0.0; 3];
                    let mut acc_depth = 0.0;
                    acc_sem.iter_mut().for_each(|v| *v = 0.0);
                    for pos in (0..record.n_contrib[p] as usize).rev() {
                        let sid = list[pos] as usize;
                        let s = &splats[sid];
                        let Some((alpha, g, clipped)) = splat_alpha(&s.proj, x, y, opts) else {
                            continue;
                        };
                        let one_minus = 1.0 - alpha;
                        t /= one_minus;
                        let wgt = alpha * t;
                        let gr = &mut grads[pos];

                        let mut d_a = 0.0;
                        for ch in 0..3 {
                            gr.color[ch] += wgt * d_rgb[ch];
                            d_a += (s.color[ch] - acc_rgb[ch]) * d_rgb[ch];
                            acc_rgb[ch] = alpha * s.color[ch] + one_minus * acc_rgb[ch];
                        }
                        gr.depth += wgt * d_depth;
                        d_a += (s.proj.depth - acc_depth) * d_depth;
                        acc_depth = alpha * s.proj.depth + one_minus * acc_depth;
                        if let Some(ds) = d_sem {
                            let f = &record.semantic[fdim * sid..fdim * (sid + 1)];
                            let sg = &mut sem_grads[fdim * pos..fdim * (pos + 1)];
                            for k in 0..fdim {
                                sg[k] += wgt * ds[k];
                                d_a += (f[k] - acc_sem[k]) * ds[k];
                                acc_sem[k] = alpha * f[k] + one_minus * acc_sem[k];
                            }
                        }
                        let mut d_alpha_total = t * d_a + d_alpha * t_final / one_minus;
                        if clipped {
                            d_alpha_total = 0.0;
                        }
                        if d_alpha_total == 0.0 {
                            continue;
                        }
                        gr.opacity += g * d_alpha_total;
                        let d_power = d_alpha_total * alpha;
                        let dx = x as f64 + 0.5 - s.proj.mean2d.x;
                        let dy = y as f64 + 0.5 - s.proj.mean2d.y;
                        let [a, b, c] = s.proj.conic;
                        gr.mean2d[0] += d_power * (a * dx + b * dy);
                        gr.mean2d[1] += d_power * (b * dx + c * dy);
                        gr.conic[0] += -0.5 * dx * dx * d_power;
                        gr.conic[1] += -dx * dy * d_power;
                        gr.conic[2] += -0.5 * dy * dy * d_power;
                    }
                }
            }
            (grads, sem_grads)
        })
        .collect();

    // Fixed-order reduction over tiles.
    let mut per_splat = vec![SplatGrad::default(); splats.len()];
    let mut per_splat_sem = vec![0.0; splats.len() * fdim];
    for (list, (grads, sem)) in record.tile_lists.iter().zip(&partials) {
        for (pos, &sid) in list.iter().enumerate() {
            let sid = sid as usize;
            per_splat[sid].add(&grads[pos]);
            for k in 0..fdim {
                per_splat_sem[fdim * sid + k] += sem[fdim * pos + k];
            }
        }
    }

    let n = record.num_gaussians;
    let stride = deformed.sh_stride();
    let mut out = GaussianGrads {
        positions: vec![0.0; 3 * n],
        log_scales: vec![0.0; 3 * n],
        rotations: vec![0.0; 4 * n],
        opacity_logits: vec![0.0; n],
        sh_coeffs: vec![0.0; stride * n],
        semantic: vec![0.0; fdim * n],
        mean2d_norm: vec![0.0; n],
        visible: record.visible_mask(),
    };

    let w_rot = cam.rotation();
    let degree = deformed.active_sh_degree.min(deformed.sh_degree);
    let n_basis = sh_basis_len(degree);
    let half_w = 0.5 * w as f64;
    let half_h = 0.5 * h as f64;

    struct Geo {
        pos: Vec3,
        log_scale: Vec3,
        rot: Vector4<f64>,
    }
    let geo: Vec<Geo> = splats
        .par_iter()
        .zip(per_splat.par_iter())
        .map(|(s, g)| {
            let i = s.index;
            let proj = &s.proj;
            let tcam = proj.cam;
            let z = tcam.z;

            // conic -> cov2d
            let k = Matrix2::new(proj.conic[0], proj.conic[1], proj.conic[1], proj.conic[2]);
            let gk = Matrix2::new(g.conic[0], 0.5 * g.conic[1], 0.5 * g.conic[1], g.conic[2]);
            let g_cov2d = -(k * gk * k);

            let ls = Vec3::from_column_slice(&deformed.log_scales[3 * i..3 * i + 3]);
            let q_raw = Vector4::from_column_slice(&deformed.rotations[4 * i..4 * i + 4]);
            let q = q_raw.normalize();
            let r = quat_to_rotmat(&q);
            let scales = ls.map(f64::exp);
            let m = r * Matrix3::from_diagonal(&scales);
            let sigma = m * m.transpose();

            let tmat: Matrix2x3<f64> = proj.jacobian * w_rot;
            let g_sigma: Mat3 = tmat.transpose() * g_cov2d * tmat;
            let g_t: Matrix2x3<f64> = 2.0 * g_cov2d * tmat * sigma;
            let g_j: Matrix2x3<f64> = g_t * w_rot.transpose();

            let (fx, fy) = (cam.fx, cam.fy);
            let mut g_cam = Vec3::zeros();
            // Pixel mean.
            g_cam.x += g.mean2d[0] * fx / z;
            g_cam.y += g.mean2d[1] * fy / z;
            g_cam.z += -g.mean2d[0] * fx * tcam.x / (z * z) - g.mean2d[1] * fy * tcam.y / (z * z);
            // Depth.
            g_cam.z += g.depth;
            // Jacobian entries.
            g_cam.z += g_j[(0, 0)] * (-fx / (z * z)) + g_j[(1, 1)] * (-fy / (z * z));
            let j02 = proj.jacobian[(0, 2)];
            let j12 = proj.jacobian[(1, 2)];
            if proj.clamped[0] {
                // j02 = -fx * c / z with c fixed
                g_cam.z += g_j[(0, 2)] * (-j02 / z);
            } else {
                g_cam.x += g_j[(0, 2)] * (-fx / (z * z));
                g_cam.z += g_j[(0, 2)] * (-2.0 * j02 / z);
            }
            if proj.clamped[1] {
                g_cam.z += g_j[(1, 2)] * (-j12 / z);
            } else {
                g_cam.y += g_j[(1, 2)] * (-fy / (z * z));
                g_cam.z += g_j[(1, 2)] * (-2.0 * j12 / z);
            }
            let g_pos = w_rot.transpose() * g_cam;

            // Σ = M Mᵀ, M = R S
            let g_m = 2.0 * g_sigma * m;
            let mut g_r = Mat3::zeros();
            let mut g_ls = Vec3::zeros();
            for col in 0..3 {
                let mut gs = 0.0;
                for row in 0..3 {
                    g_r[(row, col)] = g_m[(row, col)] * scales[col];
                    gs += r[(row, col)] * g_m[(row, col)];
                }
                g_ls[col] = gs * scales[col];
            }
            let g_q = normalize_grad(&q_raw, &rotmat_grad_to_quat(&q, &g_r));

            Geo {
                pos: g_pos,
                log_scale: g_ls,
                rot: g_q,
            }
        })
        .collect();

    for ((sid, s), (g, geo)) in splats.iter().enumerate().zip(per_splat.iter().zip(&geo)) {
        let i = s.index;
        for d in 0..3 {
            out.positions[3 * i + d] = geo.pos[d];
            out.log_scales[3 * i + d] = geo.log_scale[d];
        }
        for d in 0..4 {
            out.rotations[4 * i + d] = geo.rot[d];
        }
        let o = sigmoid(deformed.opacity_logits[i]);
        out.opacity_logits[i] = g.opacity * o * (1.0 - o);
        let sh = &mut out.sh_coeffs[stride * i..stride * (i + 1)];
        for ch in 0..3 {
            if s.color_raw[ch] < 0.0 {
                continue;
            }
            for b in 0..n_basis {
                sh[3 * b + ch] = s.basis[b] * g.color[ch];
            }
        }
        out.semantic[fdim * i..fdim * (i + 1)].copy_from_slice(&per_splat_sem[fdim * sid..fdim * (sid + 1)]);
        out.mean2d_norm[i] = (g.mean2d[0] * half_w).hypot(g.mean2d[1] * half_h);
    }
    Ok(out)
}
