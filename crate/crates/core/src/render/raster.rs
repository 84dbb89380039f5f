use rayon::prelude::*;

use super::project::{project, ProjectedGaussian};
use super::{CameraModel, RenderOptions};
use crate::error::{Error, Result};
use crate::math::{sigmoid, Vec3};
use crate::scene::sh::{sh_basis, sh_basis_len, sh_contract, MAX_SH_DEGREE};
use crate::scene::{covariance_unchecked, DeformedGaussians};

const BASIS_LEN: usize = sh_basis_len(MAX_SH_DEGREE);

/// Images produced by one render. Buffers are row-major, channels last.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderOutput {
    pub width: usize,
    pub height: usize,
    /// `H x W x 3`, unclamped above.
    pub rgb: Vec<f64>,
    /// `H x W`, alpha-weighted camera depth.
    pub depth: Vec<f64>,
    /// `H x W x semantic_dim`.
    pub semantic: Vec<f64>,
    pub semantic_dim: usize,
    /// `H x W`, `1 - T_final`.
    pub alpha: Vec<f64>,
}

impl RenderOutput {
    fn blank(width: usize, height: usize, semantic_dim: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            rgb: vec![0.0; 3 * n],
            depth: vec![0.0; n],
            semantic: vec![0.0; semantic_dim * n],
            semantic_dim,
            alpha: vec![0.0; n],
        }
    }
}

/// A visible Gaussian with its colour resolved for this view.
#[derive(Clone, Debug)]
pub(crate) struct Splat {
    pub index: usize,
    pub proj: ProjectedGaussian,
    pub color: [f64; 3],
    pub color_raw: [f64; 3],
    pub basis: [f64; BASIS_LEN],
}

/// Everything the backward pass needs from a forward render.
#[derive(Clone, Debug)]
pub struct RenderRecord {
    pub(crate) camera: CameraModel,
    pub(crate) opts: RenderOptions,
    pub(crate) num_gaussians: usize,
    pub(crate) semantic_dim: usize,
    pub(crate) splats: Vec<Splat>,
    /// Per-splat semantic features, `splats.len() x semantic_dim`.
    pub(crate) semantic: Vec<f64>,
    pub(crate) tiles_x: usize,
    /// Splat ids per tile, front to back.
    pub(crate) tile_lists: Vec<Vec<u32>>,
    /// Per-pixel transmittance after the last contributor.
    pub(crate) final_t: Vec<f64>,
    /// Per-pixel count of tile-list entries that were traversed.
    pub(crate) n_contrib: Vec<u32>,
}

impl RenderRecord {
    /// Number of Gaussians that survived culling.
    pub fn visible_count(&self) -> usize {
        self.splats.len()
    }

    /// Whether Gaussian `i` survived culling in this view.
    pub fn visible_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.num_gaussians];
        for s in &self.splats {
            m[s.index] = true;
        }
        m
    }

    /// Compositing weights `α_i T_i` at a pixel, front to back, as
    /// `(gaussian index, weight)` pairs.
    pub fn pixel_weights(&self, x: usize, y: usize) -> Vec<(usize, f64)> {
        let ts = self.opts.tile_size;
        let tile = (y / ts) * self.tiles_x + x / ts;
        let pix = y * self.camera.width + x;
        let mut t = 1.0;
        let mut out = Vec::new();
        let list = &self.tile_lists[tile];
        for &sid in &list[..self.n_contrib[pix] as usize] {
            let s = &self.splats[sid as usize];
            let Some((alpha, _, _)) = splat_alpha(&s.proj, x, y, &self.opts) else {
                continue;
            };
            out.push((s.index, alpha * t));
            t *= 1.0 - alpha;
        }
        out
    }

    /// Transmittance left at a pixel after compositing.
    pub fn final_transmittance(&self, x: usize, y: usize) -> f64 {
        self.final_t[y * self.camera.width + x]
    }
}

/// Kernel evaluation at a pixel centre: `(alpha, kernel value, clipped)`,
/// or `None` when the contribution falls under the alpha floor.
#[inline]
pub(crate) fn splat_alpha(p: &ProjectedGaussian, x: usize, y: usize, opts: &RenderOptions) -> Option<(f64, f64, bool)> {
    let [x0, y0, x1, y1] = p.pixel_rect;
    if x < x0 || x >= x1 || y < y0 || y >= y1 {
        return None;
    }
    let dx = x as f64 + 0.5 - p.mean2d.x;
    let dy = y as f64 + 0.5 - p.mean2d.y;
    let [a, b, c] = p.conic;
    let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
    if power > 0.0 || power < p.power_floor {
        return None;
    }
    let g = power.exp();
    let raw = p.opacity * g;
    if raw < opts.alpha_min {
        return None;
    }
    if raw > opts.alpha_max {
        Some((opts.alpha_max, g, true))
    } else {
        Some((raw, g, false))
    }
}

/// Renders `deformed` from `camera`, with view directions taken from the
/// camera centre to each Gaussian.
pub fn render(deformed: &DeformedGaussians, camera: &CameraModel, opts: &RenderOptions) -> Result<(RenderOutput, RenderRecord)> {
    render_with_view_dirs(deformed, camera, opts, None)
}

/// Like [`render`] but with caller-supplied SH view directions (one unit
/// vector per Gaussian). Useful when the directions must stay fixed while
/// positions are perturbed.
pub fn render_with_view_dirs(
    deformed: &DeformedGaussians,
    camera: &CameraModel,
    opts: &RenderOptions,
    view_dirs: Option<&[[f64; 3]]>,
) -> Result<(RenderOutput, RenderRecord)> {
    deformed.validate()?;
    camera.validate()?;
    if opts.tile_size == 0 {
        return Err(Error::invalid("tile size must be positive"));
    }
    if view_dirs.is_some_and(|d| d.len() != deformed.len()) {
        return Err(Error::invalid("one view direction per Gaussian required"));
    }
    let n = deformed.len();
    let (w, h) = (camera.width, camera.height);
    let fdim = deformed.semantic_dim;
    let stride = deformed.sh_stride();
    let degree = deformed.active_sh_degree.min(deformed.sh_degree);
    let center = camera.center();

    let mut splats: Vec<Splat> = (0..n)
        .into_par_iter()
        .filter_map(|i| {
            let mean = Vec3::from_column_slice(&deformed.positions[3 * i..3 * i + 3]);
            let ls = Vec3::from_column_slice(&deformed.log_scales[3 * i..3 * i + 3]);
            let q = nalgebra::Vector4::from_column_slice(&deformed.rotations[4 * i..4 * i + 4]);
            let cov = covariance_unchecked(&ls, &q);
            let opacity = sigmoid(deformed.opacity_logits[i]);
            let proj = project(&mean, &cov, opacity, camera, opts)?;
            let dir = match view_dirs {
                Some(d) => d[i],
                None => {
                    let v = (mean - center).normalize();
                    [v.x, v.y, v.z]
                }
            };
            let mut basis = [0.0; BASIS_LEN];
            sh_basis(degree, dir, &mut basis);
            let color_raw = sh_contract(&deformed.sh_coeffs[stride * i..stride * (i + 1)], &basis, sh_basis_len(degree));
            Some(Splat {
                index: i,
                proj,
                color: color_raw.map(|c| c.max(0.0)),
                color_raw,
                basis,
            })
        })
        .collect();
    splats.sort_by(|a, b| a.proj.depth.total_cmp(&b.proj.depth).then(a.index.cmp(&b.index)));

    let semantic: Vec<f64> = splats
        .iter()
        .flat_map(|s| deformed.semantic[fdim * s.index..fdim * (s.index + 1)].iter().copied())
        .collect();

    let ts = opts.tile_size;
    let tiles_x = w.div_ceil(ts);
    let tiles_y = h.div_ceil(ts);
    let mut tile_lists: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (sid, s) in splats.iter().enumerate() {
        let [x0, y0, x1, y1] = s.proj.pixel_rect;
        for ty in y0 / ts..=(y1 - 1) / ts {
            for tx in x0 / ts..=(x1 - 1) / ts {
                tile_lists[ty * tiles_x + tx].push(sid as u32);
            }
        }
    }

    struct TileOut {
        rgb: Vec<f64>,
        depth: Vec<f64>,
        sem: Vec<f64>,
        t: Vec<f64>,
        count: Vec<u32>,
    }
    let tile_out: Vec<TileOut> = tile_lists
        .par_iter()
        .enumerate()
        .map(|(tile, list)| {
            let (tx, ty) = (tile % tiles_x, tile / tiles_x);
            let xs = tx * ts..((tx + 1) * ts).min(w);
            let ys = ty * ts..((ty + 1) * ts).min(h);
            let np = xs.len() * ys.len();
            let mut out = TileOut {
                rgb: vec![0.0; 3 * np],
                depth: vec![0.0; np],
                sem: vec![0.0; fdim * np],
                t: vec![1.0; np],
                count: vec![0; np],
            };
            let mut k = 0;
            for y in ys.clone() {
                for x in xs.clone() {
                    let mut t = 1.0;
                    let mut last = 0;
                    for (pos, &sid) in list.iter().enumerate() {
                        let s = &splats[sid as usize];
                        let Some((alpha, _, _)) = splat_alpha(&s.proj, x, y, opts) else {
                            continue;
                        };
                        let next_t = t * (1.0 - alpha);
                        if next_t < opts.min_transmittance {
                            break;
                        }
                        let wgt = alpha * t;
                        for ch in 0..3 {
                            out.rgb[3 * k + ch] += wgt * s.color[ch];
                        }
                        out.depth[k] += wgt * s.proj.depth;
                        let f = &semantic[fdim * sid as usize..fdim * (sid as usize + 1)];
                        for (o, v) in out.sem[fdim * k..fdim * (k + 1)].iter_mut().zip(f) {
                            *o += wgt * v;
                        }
                        t = next_t;
                        last = pos + 1;
                    }
                    out.t[k] = t;
                    out.count[k] = last as u32;
                    k += 1;
                }
            }
            out
        })
        .collect();

    let mut image = RenderOutput::blank(w, h, fdim);
    let mut final_t = vec![1.0; w * h];
    let mut n_contrib = vec![0u32; w * h];
    for (tile, out) in tile_out.iter().enumerate() {
        let (tx, ty) = (tile % tiles_x, tile / tiles_x);
        let mut k = 0;
        for y in ty * ts..((ty + 1) * ts).min(h) {
            for x in tx * ts..((tx + 1) * ts).min(w) {
                let p = y * w + x;
                image.rgb[3 * p..3 * p + 3].copy_from_slice(&out.rgb[3 * k..3 * k + 3]);
                image.depth[p] = out.depth[k];
                image.semantic[fdim * p..fdim * (p + 1)].copy_from_slice(&out.sem[fdim * k..fdim * (k + 1)]);
                image.alpha[p] = 1.0 - out.t[k];
                final_t[p] = out.t[k];
                n_contrib[p] = out.count[k];
                k += 1;
            }
        }
    }

    let record = RenderRecord {
        camera: camera.clone(),
        opts: *opts,
        num_gaussians: n,
        semantic_dim: fdim,
        splats,
        semantic,
        tiles_x,
        tile_lists,
        final_t,
        n_contrib,
    };
    Ok((image, record))
}
