//! Training objective: photometric, structural, depth, feature, grid
//! smoothness and offset-magnitude terms, each with its gradient.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub rgb: f64,
    pub depth: f64,
    pub feat: f64,
    pub ssim: f64,
    pub tv: f64,
    pub reg_x: f64,
    pub reg_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rgb: 1.0,
            depth: 0.1,
            feat: 0.1,
            ssim: 0.1,
            tv: 0.1,
            reg_x: 0.01,
            reg_c: 0.01,
        }
    }
}

impl LossWeights {
    fn pairs(&self) -> [(&'static str, f64); 7] {
        [
            ("rgb", self.rgb),
            ("depth", self.depth),
            ("feat", self.feat),
            ("ssim", self.ssim),
            ("tv", self.tv),
            ("reg_x", self.reg_x),
            ("reg_c", self.reg_c),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.pairs() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::invalid(format!("loss weight `{name}` must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Unweighted loss terms. `ssim` holds `1 - SSIM`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rgb: f64,
    pub depth: f64,
    pub feat: f64,
    pub ssim: f64,
    pub tv: f64,
    pub reg_x: f64,
    pub reg_c: f64,
}

impl LossTerms {
    fn pairs(&self) -> [(&'static str, f64); 7] {
        [
            ("rgb", self.rgb),
            ("depth", self.depth),
            ("feat", self.feat),
            ("ssim", self.ssim),
            ("tv", self.tv),
            ("reg_x", self.reg_x),
            ("reg_c", self.reg_c),
        ]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub terms: LossTerms,
    pub total: f64,
}

/// Weighted sum of the terms; a non-finite term is reported by name.
pub fn total_loss(terms: &LossTerms, weights: &LossWeights) -> Result<LossBreakdown> {
    let mut total = 0.0;
    for ((name, v), (_, w)) in terms.pairs().into_iter().zip(weights.pairs()) {
        if !v.is_finite() {
            return Err(Error::NonFiniteLoss {
                term: name,
                iteration: None,
            });
        }
        total += w * v;
    }
    Ok(LossBreakdown { terms: *terms, total })
}

fn same_len(a: &[f64], b: &[f64], what: &str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("{what}: shapes differ ({} vs {})", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::invalid(format!("{what}: empty input")));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_rgb(render: &[f64], target: &[f64]) -> Result<f64> {
    same_len(render, target, "l1")?;
    Ok(render.iter().zip(target).map(|(a, b)| (a - b).abs()).sum::<f64>() / render.len() as f64)
}

/// [`l1_rgb`] and its gradient w.r.t. `render` (zero where equal).
pub fn l1_rgb_grad(render: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = l1_rgb(render, target)?;
    let n = render.len() as f64;
    let grad = render
        .iter()
        .zip(target)
        .map(|(a, b)| {
            let d = a - b;
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect();
    Ok((value, grad))
}

/// Mean squared difference over every element.
pub fn feat_l2(render: &[f64], target: &[f64]) -> Result<f64> {
    same_len(render, target, "feature l2")?;
    Ok(render.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / render.len() as f64)
}

pub fn feat_l2_grad(render: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    let value = feat_l2(render, target)?;
    let n = render.len() as f64;
    Ok((value, render.iter().zip(target).map(|(a, b)| 2.0 * (a - b) / n).collect()))
}

/// One depth measurement at integer pixel `(x, y)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthSample {
    pub x: usize,
    pub y: usize,
    pub depth: f64,
}

fn check_samples(width: usize, height: usize, len: usize, samples: &[DepthSample]) -> Result<()> {
    if width * height != len {
        return Err(Error::invalid(format!("depth map has {len} pixels, expected {width}x{height}")));
    }
    if let Some(s) = samples.iter().find(|s| s.x >= width || s.y >= height) {
        return Err(Error::invalid(format!("depth sample ({}, {}) outside the image", s.x, s.y)));
    }
    Ok(())
}

/// Mean squared error at the sampled pixels; zero without samples.
pub fn depth_l2(depth: &[f64], width: usize, height: usize, samples: &[DepthSample]) -> Result<f64> {
    check_samples(width, height, depth.len(), samples)?;
    if samples.is_empty() {
        return Ok(0.0);
    }
    let sum: f64 = samples
        .iter()
        .map(|s| {
            let d = depth[s.y * width + s.x] - s.depth;
            d * d
        })
        .sum();
    Ok(sum / samples.len() as f64)
}

pub fn depth_l2_grad(depth: &[f64], width: usize, height: usize, samples: &[DepthSample]) -> Result<(f64, Vec<f64>)> {
    let value = depth_l2(depth, width, height, samples)?;
    let mut grad = vec![0.0; depth.len()];
    let n = samples.len() as f64;
    for s in samples {
        let i = s.y * width + s.x;
        grad[i] += 2.0 * (depth[i] - s.depth) / n;
    }
    Ok((value, grad))
}

/// Mean absolute value of the position and colour offsets.
pub fn reg_offsets(dx: &[f64], dc: &[f64]) -> (f64, f64) {
    let mean_abs = |v: &[f64]| {
        if v.is_empty() {
            0.0
        } else {
            v.iter().map(|a| a.abs()).sum::<f64>() / v.len() as f64
        }
    };
    (mean_abs(dx), mean_abs(dc))
}

/// Gradient of one [`reg_offsets`] output w.r.t. its input.
pub fn reg_offsets_grad(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    v.iter()
        .map(|a| {
            if *a > 0.0 {
                1.0 / n
            } else if *a < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
        .collect()
}

/// Normalized 1-D Gaussian taps; the 2-D window is their outer product.
pub fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Valid-mode separable correlation of one channel.
fn blur_valid(src: &[f64], width: usize, height: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width + 1 - SSIM_WINDOW;
    let oh = height + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let line = &src[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = k.iter().zip(&line[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`blur_valid`]: scatters a valid-size map back to full size.
fn blur_valid_adjoint(g: &[f64], width: usize, height: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width + 1 - SSIM_WINDOW;
    let oh = height + 1 - SSIM_WINDOW;
    let mut rows = vec![0.0; ow * height];
    for y in 0..oh {
        for i in 0..SSIM_WINDOW {
            for x in 0..ow {
                rows[(y + i) * ow + x] += k[i] * g[y * ow + x];
            }
        }
    }
    let mut out = vec![0.0; width * height];
    for y in 0..height {
        for x in 0..ow {
            let v = rows[y * ow + x];
            for i in 0..SSIM_WINDOW {
                out[y * width + x + i] += k[i] * v;
            }
        }
    }
    out
}

/// Per-window SSIM for one channel plus the statistics the gradient needs.
struct ChannelSsim {
    map: Vec<f64>,
    /// `dS/d(mu_x)`, `dS/d(E[x^2])`, `dS/d(E[xy])` per window.
    d_mu: Vec<f64>,
    d_xx: Vec<f64>,
    d_xy: Vec<f64>,
}

fn channel_ssim(x: &[f64], y: &[f64], width: usize, height: usize, with_grad: bool) -> ChannelSsim {
    let k = ssim_kernel();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(y).map(|(a, b)| a * b).collect();
    let mu_x = blur_valid(x, width, height, &k);
    let mu_y = blur_valid(y, width, height, &k);
    let e_xx = blur_valid(&xx, width, height, &k);
    let e_yy = blur_valid(&yy, width, height, &k);
    let e_xy = blur_valid(&xy, width, height, &k);
    let n = mu_x.len();
    let mut out = ChannelSsim {
        map: vec![0.0; n],
        d_mu: Vec::new(),
        d_xx: Vec::new(),
        d_xy: Vec::new(),
    };
    if with_grad {
        out.d_mu = vec![0.0; n];
        out.d_xx = vec![0.0; n];
        out.d_xy = vec![0.0; n];
    }
    for i in 0..n {
        let (mx, my) = (mu_x[i], mu_y[i]);
        let sxx = e_xx[i] - mx * mx;
        let syy = e_yy[i] - my * my;
        let sxy = e_xy[i] - mx * my;
        let a1 = 2.0 * mx * my + SSIM_C1;
        let a2 = 2.0 * sxy + SSIM_C2;
        let b1 = mx * mx + my * my + SSIM_C1;
        let b2 = sxx + syy + SSIM_C2;
        let s = a1 * a2 / (b1 * b2);
        out.map[i] = s;
        if with_grad {
            let ds_dsxx = -s / b2;
            let ds_dsxy = 2.0 * a1 / (b1 * b2);
            let ds_dmx = 2.0 * my * a2 / (b1 * b2) - s * 2.0 * mx / b1;
            out.d_mu[i] = ds_dmx - 2.0 * mx * ds_dsxx - my * ds_dsxy;
            out.d_xx[i] = ds_dsxx;
            out.d_xy[i] = ds_dsxy;
        }
    }
    out
}

fn check_ssim_shape(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> Result<()> {
    same_len(a, b, "ssim")?;
    if a.len() != width * height * channels {
        return Err(Error::invalid(format!(
            "ssim: {} values for a {width}x{height}x{channels} image",
            a.len()
        )));
    }
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(Error::invalid(format!(
            "ssim: image {width}x{height} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    Ok(())
}

fn split_channel(img: &[f64], channels: usize, c: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(channels).copied().collect()
}

/// SSIM map over valid window positions, averaged across channels. Row
/// `y`, column `x` of the map is the window centred on pixel
/// `(x + 5, y + 5)`.
pub fn ssim_map(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> Result<Vec<f64>> {
    check_ssim_shape(a, b, width, height, channels)?;
    let mut acc: Vec<f64> = Vec::new();
    for c in 0..channels {
        let m = channel_ssim(&split_channel(a, channels, c), &split_channel(b, channels, c), width, height, false).map;
        if acc.is_empty() {
            acc = m;
        } else {
            acc.iter_mut().zip(&m).for_each(|(s, v)| *s += v);
        }
    }
    acc.iter_mut().for_each(|v| *v /= channels as f64);
    Ok(acc)
}

/// Mean SSIM of interleaved `width x height x channels` images.
pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> Result<f64> {
    let map = ssim_map(a, b, width, height, channels)?;
    Ok(map.iter().sum::<f64>() / map.len() as f64)
}

/// Mean SSIM and its gradient w.r.t. `a`.
pub fn ssim_grad(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> Result<(f64, Vec<f64>)> {
    check_ssim_shape(a, b, width, height, channels)?;
    let k = ssim_kernel();
    let windows = ((width + 1 - SSIM_WINDOW) * (height + 1 - SSIM_WINDOW)) as f64;
    let scale = 1.0 / (windows * channels as f64);
    let mut total = 0.0;
    let mut grad = vec![0.0; a.len()];
    for c in 0..channels {
        let x = split_channel(a, channels, c);
        let y = split_channel(b, channels, c);
        let mut cs = channel_ssim(&x, &y, width, height, true);
        total += cs.map.iter().sum::<f64>();
        for v in [&mut cs.d_mu, &mut cs.d_xx, &mut cs.d_xy] {
            v.iter_mut().for_each(|g| *g *= scale);
        }
        let g_mu = blur_valid_adjoint(&cs.d_mu, width, height, &k);
        let g_xx = blur_valid_adjoint(&cs.d_xx, width, height, &k);
        let g_xy = blur_valid_adjoint(&cs.d_xy, width, height, &k);
        for i in 0..width * height {
            grad[i * channels + c] = g_mu[i] + 2.0 * x[i] * g_xx[i] + y[i] * g_xy[i];
        }
    }
    Ok((total * scale, grad))
}
