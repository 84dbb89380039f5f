//! Spatial-temporal deformation field.
//!
//! Each Gaussian's `(x, y, z, t)` is normalized into the unit hypercube and
//! projected onto six axis-pair planes at several resolutions. The six
//! bilinear lookups of one resolution are fused by an elementwise product,
//! the resolutions are concatenated, and a small merge MLP turns the result
//! into a feature that three decoder heads map to a position offset, an SH
//! offset and a semantic feature.
//!
//! All weights live in one flat buffer (MLPs first, then planes) so the
//! optimizer and the checkpoint format see a single array.

mod grid;
mod mlp;

pub use grid::{PlaneRef, Stencil, FIRST_TEMPORAL_PLANE, PLANE_AXES};
pub use mlp::{Linear, TwoLayer};

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::scene::{sh_basis_len, DeformedGaussians, GaussianSet};
use crate::{Error, Result};

/// Gaussians per parallel work item in the backward pass. Fixed so the
/// reduction order does not depend on the thread count.
const CHUNK: usize = 64;
/// Gaussians whose plane gradients are buffered before scattering.
const BLOCK: usize = 2048;

static NEXT_GENERATION: AtomicU64 = AtomicU64::new(1);

fn next_generation() -> u64 {
    NEXT_GENERATION.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlaneInit {
    /// Spatial planes uniform in `[0.1, 0.5]`, temporal planes exactly 1.
    /// The field starts time-invariant and every factor of the product
    /// receives a usable gradient.
    Multiplicative,
    /// Every plane uniform in `[-1e-4, 1e-4]`.
    Symmetric,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    /// Spatial lattice size at scale 1.
    pub base_resolution: usize,
    /// Temporal lattice size at scale 1.
    pub time_resolution: usize,
    /// Upsampling factors.
    pub scales: Vec<usize>,
    /// Feature channels per plane.
    pub hidden_dim: usize,
    pub merge_width: usize,
    /// Output width of the merge MLP.
    pub feature_dim: usize,
    pub head_width: usize,
    pub semantic_dim: usize,
    /// Disables the SH head; colour offsets are then identically zero.
    pub defer_color: bool,
    /// Fraction of the box extent added on each side of the scene bounds.
    pub bounds_padding: f64,
    pub plane_init: PlaneInit,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            base_resolution: 64,
            time_resolution: 50,
            scales: vec![1, 2, 4],
            hidden_dim: 32,
            merge_width: 64,
            feature_dim: 64,
            head_width: 64,
            semantic_dim: 3,
            defer_color: false,
            bounds_padding: 0.1,
            plane_init: PlaneInit::Multiplicative,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("field.base_resolution", self.base_resolution),
            ("field.time_resolution", self.time_resolution),
            ("field.hidden_dim", self.hidden_dim),
            ("field.merge_width", self.merge_width),
            ("field.feature_dim", self.feature_dim),
            ("field.head_width", self.head_width),
            ("field.semantic_dim", self.semantic_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if self.base_resolution < 2 {
            return Err(Error::invalid("field.base_resolution must be at least 2"));
        }
        if self.scales.is_empty() || self.scales.contains(&0) {
            return Err(Error::invalid("field.scales must be a non-empty list of positive factors"));
        }
        if !(self.bounds_padding.is_finite() && self.bounds_padding >= 0.0) {
            return Err(Error::invalid("field.bounds_padding must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Axis-aligned box and time interval mapped onto the unit hypercube.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneBounds {
    pub aabb_min: [f64; 3],
    pub aabb_max: [f64; 3],
    pub t_min: f64,
    pub t_max: f64,
}

impl SceneBounds {
    pub fn new(aabb_min: [f64; 3], aabb_max: [f64; 3], t_min: f64, t_max: f64) -> Result<Self> {
        let b = Self {
            aabb_min,
            aabb_max,
            t_min,
            t_max,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.aabb_min.iter().chain(&self.aabb_max).all(|v| v.is_finite())
            && self.t_min.is_finite()
            && self.t_max.is_finite();
        if !finite {
            return Err(Error::invalid("scene bounds must be finite"));
        }
        if (0..3).any(|a| self.aabb_max[a] <= self.aabb_min[a]) {
            return Err(Error::invalid(format!(
                "degenerate bounding box {:?}..{:?}",
                self.aabb_min, self.aabb_max
            )));
        }
        if self.t_max <= self.t_min {
            return Err(Error::invalid(format!(
                "degenerate time range [{}, {}]",
                self.t_min, self.t_max
            )));
        }
        Ok(())
    }

    /// Tight box around `positions` (flat `N x 3`). Flat axes get a unit
    /// thickness so the result is never degenerate.
    pub fn around(positions: &[f64], t_min: f64, t_max: f64) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::invalid("cannot bound an empty point set"));
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in positions.chunks_exact(3) {
            for a in 0..3 {
                lo[a] = lo[a].min(p[a]);
                hi[a] = hi[a].max(p[a]);
            }
        }
        for a in 0..3 {
            if hi[a] - lo[a] < 1e-6 {
                lo[a] -= 0.5;
                hi[a] += 0.5;
            }
        }
        Self::new(lo, hi, t_min, t_max)
    }

    /// Widens each spatial axis by `fraction` of its extent on both sides.
    pub fn padded(&self, fraction: f64) -> Self {
        let mut out = *self;
        for a in 0..3 {
            let pad = fraction * (self.aabb_max[a] - self.aabb_min[a]);
            out.aabb_min[a] -= pad;
            out.aabb_max[a] += pad;
        }
        out
    }

    /// Affine map to `[0, 1]^4`, clamped.
    pub fn normalize(&self, x: f64, y: f64, z: f64, t: f64) -> [f64; 4] {
        self.normalize_with_slope([x, y, z], t).0
    }

    /// Normalized coordinates and their derivatives w.r.t. the inputs;
    /// clamped axes have zero slope.
    pub(crate) fn normalize_with_slope(&self, p: [f64; 3], t: f64) -> ([f64; 4], [f64; 4]) {
        let mut c = [0.0; 4];
        let mut s = [0.0; 4];
        let axis = |v: f64, lo: f64, hi: f64| {
            let inv = 1.0 / (hi - lo);
            let u = (v - lo) * inv;
            if u < 0.0 {
                (0.0, 0.0)
            } else if u > 1.0 {
                (1.0, 0.0)
            } else {
                (u, inv)
            }
        };
        for a in 0..3 {
            (c[a], s[a]) = axis(p[a], self.aabb_min[a], self.aabb_max[a]);
        }
        (c[3], s[3]) = axis(t, self.t_min, self.t_max);
        (c, s)
    }
}

/// Free-function form of [`SceneBounds::normalize`].
pub fn normalize_coords(x: f64, y: f64, z: f64, t: f64, bounds: &SceneBounds) -> [f64; 4] {
    bounds.normalize(x, y, z, t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PlaneSlot {
    pub scale: usize,
    pub axes: (usize, usize),
    pub res_u: usize,
    pub res_v: usize,
    pub offset: usize,
}

impl PlaneSlot {
    pub fn len(&self, dim: usize) -> usize {
        self.res_u * self.res_v * dim
    }

    pub fn is_temporal(&self) -> bool {
        self.axes.1 == 3
    }
}

/// Offsets of every parameter block inside the flat buffer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FieldLayout {
    pub merge: TwoLayer,
    pub head_x: TwoLayer,
    pub head_sh: TwoLayer,
    pub head_sem: TwoLayer,
    /// MLP weights occupy `0..mlp_len`; planes follow.
    pub mlp_len: usize,
    /// Scale-major, six planes per scale in [`PLANE_AXES`] order.
    pub planes: Vec<PlaneSlot>,
    pub total: usize,
}

impl FieldLayout {
    fn new(cfg: &FieldConfig, sh_stride: usize) -> Self {
        let mut off = 0;
        let d = cfg.hidden_dim;
        let merge = TwoLayer::at(&mut off, cfg.scales.len() * d, cfg.merge_width, cfg.feature_dim);
        let head_x = TwoLayer::at(&mut off, cfg.feature_dim, cfg.head_width, 3);
        let head_sh = TwoLayer::at(&mut off, cfg.feature_dim, cfg.head_width, sh_stride);
        let head_sem = TwoLayer::at(&mut off, cfg.feature_dim, cfg.head_width, cfg.semantic_dim);
        let mlp_len = off;
        let mut planes = Vec::with_capacity(cfg.scales.len() * 6);
        for (s, &rho) in cfg.scales.iter().enumerate() {
            for &(i, j) in &PLANE_AXES {
                let res = |a: usize| rho * if a == 3 { cfg.time_resolution } else { cfg.base_resolution };
                let slot = PlaneSlot {
                    scale: s,
                    axes: (i, j),
                    res_u: res(i),
                    res_v: res(j),
                    offset: off,
                };
                off += slot.len(d);
                planes.push(slot);
            }
        }
        Self {
            merge,
            head_x,
            head_sh,
            head_sem,
            mlp_len,
            planes,
            total: off,
        }
    }
}

/// Intermediates a backward pass needs from the forward pass that produced
/// a [`DeformedGaussians`].
#[derive(Clone, Debug)]
pub struct DeformTape {
    t: f64,
    positions: Vec<f64>,
    /// Predicted position offsets, `N x 3`.
    pub offsets: Vec<f64>,
    /// Predicted SH offsets, `N x stride`.
    pub color_offsets: Vec<f64>,
    generation: u64,
}

impl DeformTape {
    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn len(&self) -> usize {
        self.positions.len() / 3
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Gradients from [`HexPlaneField::backward`].
#[derive(Clone, Debug)]
pub struct FieldGrads {
    /// Same layout as [`HexPlaneField::params`].
    pub params: Vec<f64>,
    /// W.r.t. the canonical positions, flat `N x 3`.
    pub positions: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct HexPlaneField {
    config: FieldConfig,
    bounds: SceneBounds,
    sh_degree: usize,
    layout: FieldLayout,
    params: Vec<f64>,
    generation: u64,
}

impl HexPlaneField {
    /// Builds a freshly initialized field. `bounds` are padded by
    /// `config.bounds_padding` before use.
    pub fn new<R: Rng>(config: FieldConfig, bounds: &SceneBounds, sh_degree: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        bounds.validate()?;
        let bounds = bounds.padded(config.bounds_padding);
        let layout = FieldLayout::new(&config, 3 * sh_basis_len(sh_degree));
        let mut params = vec![0.0; layout.total];
        layout.merge.first.init_uniform(&mut params, rng);
        layout.merge.second.init_uniform(&mut params, rng);
        for head in [&layout.head_x, &layout.head_sh, &layout.head_sem] {
            head.first.init_uniform(&mut params, rng);
        }
        layout.head_x.second.init_zero(&mut params);
        layout.head_sh.second.init_zero(&mut params);
        layout.head_sem.second.init_uniform(&mut params, rng);
        let d = config.hidden_dim;
        for slot in &layout.planes {
            let data = &mut params[slot.offset..slot.offset + slot.len(d)];
            match config.plane_init {
                PlaneInit::Multiplicative if slot.is_temporal() => data.fill(1.0),
                PlaneInit::Multiplicative => data.iter_mut().for_each(|v| *v = rng.random_range(0.1..0.5)),
                PlaneInit::Symmetric => data.iter_mut().for_each(|v| *v = rng.random_range(-1e-4..1e-4)),
            }
        }
        Ok(Self {
            config,
            bounds,
            sh_degree,
            layout,
            params,
            generation: next_generation(),
        })
    }

    /// Reassembles a field from stored parts; `bounds` are used as given.
    pub fn from_parts(config: FieldConfig, bounds: SceneBounds, sh_degree: usize, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        bounds.validate()?;
        let layout = FieldLayout::new(&config, 3 * sh_basis_len(sh_degree));
        if params.len() != layout.total {
            return Err(Error::Format(format!(
                "field expects {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        let field = Self {
            config,
            bounds,
            sh_degree,
            layout,
            params,
            generation: next_generation(),
        };
        field.validate()?;
        Ok(field)
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn bounds(&self) -> &SceneBounds {
        &self.bounds
    }

    pub fn sh_degree(&self) -> usize {
        self.sh_degree
    }

    pub fn layout(&self) -> &FieldLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable access; invalidates every outstanding [`DeformTape`].
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.generation = next_generation();
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Moves the time interval onto `[t_min, t_max]`, keeping the weights.
    pub fn set_time_range(&mut self, t_min: f64, t_max: f64) -> Result<()> {
        let b = SceneBounds::new(self.bounds.aabb_min, self.bounds.aabb_max, t_min, t_max)?;
        self.bounds = b;
        self.generation = next_generation();
        Ok(())
    }

    pub fn plane(&self, index: usize) -> PlaneRef<'_> {
        let slot = &self.layout.planes[index];
        let d = self.config.hidden_dim;
        PlaneRef {
            res_u: slot.res_u,
            res_v: slot.res_v,
            dim: d,
            data: &self.params[slot.offset..slot.offset + slot.len(d)],
        }
    }

    /// Mutable feature storage of one plane, `[u][v][feature]`.
    pub fn plane_mut(&mut self, index: usize) -> &mut [f64] {
        let slot = self.layout.planes[index];
        let len = slot.len(self.config.hidden_dim);
        &mut self.params_mut()[slot.offset..slot.offset + len]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(i) = self.params.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFiniteAttribute {
                attribute: "field parameter",
                index: i,
            });
        }
        Ok(())
    }

    /// Feature vector `f(x, y, z, t)` from the merge MLP.
    pub fn encode(&self, xyz: [f64; 3], t: f64) -> Vec<f64> {
        let mut w = Work::new(self);
        self.forward_one(xyz, t, &mut w, false);
        w.f
    }

    /// Per-scale fused products, concatenated (the merge MLP's input).
    pub fn fused(&self, xyz: [f64; 3], t: f64) -> Vec<f64> {
        let mut w = Work::new(self);
        self.forward_one(xyz, t, &mut w, false);
        w.z
    }

    /// Decoder outputs `(dx, dsh, semantic)` for one feature vector.
    pub fn decode(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut w = Work::new(self);
        w.f.copy_from_slice(&f[..self.config.feature_dim]);
        self.heads(&mut w);
        (w.dx.to_vec(), w.dc, w.sem)
    }

    /// Applies the field to every Gaussian at time `t`.
    pub fn deform(&self, scene: &GaussianSet, t: f64) -> Result<(DeformedGaussians, DeformTape)> {
        if scene.is_empty() {
            return Err(Error::invalid("cannot deform an empty scene"));
        }
        if scene.sh_degree != self.sh_degree {
            return Err(Error::invalid(format!(
                "scene SH degree {} does not match field degree {}",
                scene.sh_degree, self.sh_degree
            )));
        }
        if !t.is_finite() {
            return Err(Error::invalid("time must be finite"));
        }
        let n = scene.len();
        let stride = scene.sh_stride();
        let fdim = self.config.semantic_dim;
        let mut out = DeformedGaussians::from_static(scene, fdim);
        let mut offsets = vec![0.0; n * 3];
        let mut colors = vec![0.0; n * stride];
        offsets
            .par_chunks_mut(3 * CHUNK)
            .zip(colors.par_chunks_mut(stride * CHUNK))
            .zip(out.semantic.par_chunks_mut(fdim * CHUNK))
            .enumerate()
            .for_each(|(c, ((dx, dc), sem))| {
                let mut w = Work::new(self);
                for k in 0..dx.len() / 3 {
                    let i = c * CHUNK + k;
                    let p = &scene.positions[3 * i..3 * i + 3];
                    self.forward_one([p[0], p[1], p[2]], t, &mut w, true);
                    dx[3 * k..3 * k + 3].copy_from_slice(&w.dx);
                    dc[stride * k..stride * (k + 1)].copy_from_slice(&w.dc);
                    sem[fdim * k..fdim * (k + 1)].copy_from_slice(&w.sem);
                }
            });
        for (p, d) in out.positions.iter_mut().zip(&offsets) {
            *p += d;
        }
        for (c, d) in out.sh_coeffs.iter_mut().zip(&colors) {
            *c += d;
        }
        let tape = DeformTape {
            t,
            positions: scene.positions.clone(),
            offsets,
            color_offsets: colors,
            generation: self.generation,
        };
        Ok((out, tape))
    }

    /// Reverse pass for [`Self::deform`]. Upstream gradients are w.r.t. the
    /// deformed positions (`N x 3`), SH coefficients (`N x stride`) and
    /// semantic features (`N x F`); an empty slice stands for zeros.
    pub fn backward(
        &self,
        tape: &DeformTape,
        grad_positions: &[f64],
        grad_sh: &[f64],
        grad_semantic: &[f64],
    ) -> Result<FieldGrads> {
        if tape.generation != self.generation {
            return Err(Error::State(
                "deformation tape was recorded by a different or since-modified field".into(),
            ));
        }
        let n = tape.len();
        let stride = 3 * sh_basis_len(self.sh_degree);
        let fdim = self.config.semantic_dim;
        for (name, g, w) in [
            ("position", grad_positions, 3),
            ("sh", grad_sh, stride),
            ("semantic", grad_semantic, fdim),
        ] {
            if !g.is_empty() && g.len() != n * w {
                return Err(Error::invalid(format!(
                    "{name} gradient has {} entries, expected {}",
                    g.len(),
                    n * w
                )));
            }
        }
        let d = self.config.hidden_dim;
        let n_planes = self.layout.planes.len();
        let mut grads = vec![0.0; self.layout.total];
        let mut grad_pos = vec![0.0; n * 3];
        let (mlp_grads, plane_grads) = grads.split_at_mut(self.layout.mlp_len);
        let mut plane_slices: Vec<&mut [f64]> = Vec::with_capacity(n_planes);
        let mut rest = plane_grads;
        for slot in &self.layout.planes {
            let (head, tail) = rest.split_at_mut(slot.len(d));
            plane_slices.push(head);
            rest = tail;
        }

        let upstream = |src: &[f64], i: usize, w: usize, dst: &mut [f64]| {
            if src.is_empty() {
                dst[..w].fill(0.0);
            } else {
                dst[..w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
        };

        for block in (0..n).step_by(BLOCK) {
            let block_end = (block + BLOCK).min(n);
            let chunks: Vec<ChunkGrads> = (block..block_end)
                .step_by(CHUNK)
                .collect::<Vec<_>>()
                .into_par_iter()
                .map(|start| {
                    let end = (start + CHUNK).min(block_end);
                    let mut cg = ChunkGrads {
                        mlp: vec![0.0; self.layout.mlp_len],
                        positions: vec![0.0; (end - start) * 3],
                        stencils: Vec::new(),
                        dq: Vec::new(),
                        active: vec![false; end - start],
                    };
                    let mut w = Work::new(self);
                    let mut b = BackWork::new(self);
                    for i in start..end {
                        upstream(grad_positions, i, 3, &mut b.gdx);
                        upstream(grad_sh, i, stride, &mut b.gdc);
                        upstream(grad_semantic, i, fdim, &mut b.gsem);
                        if b.gdx.iter().chain(&b.gdc).chain(&b.gsem).all(|v| *v == 0.0) {
                            continue;
                        }
                        let p = &tape.positions[3 * i..3 * i + 3];
                        self.forward_one([p[0], p[1], p[2]], tape.t, &mut w, true);
                        let gp = self.backward_one(&w, &mut b, &mut cg.mlp);
                        cg.positions[3 * (i - start)..3 * (i - start) + 3].copy_from_slice(&gp);
                        cg.active[i - start] = true;
                        for st in &w.stencils {
                            cg.stencils.push((st.index, st.weight));
                        }
                        cg.dq.extend_from_slice(&b.dq);
                    }
                    cg
                })
                .collect();

            for cg in &chunks {
                for (g, v) in mlp_grads.iter_mut().zip(&cg.mlp) {
                    *g += v;
                }
            }
            let mut row = block;
            for cg in &chunks {
                grad_pos[3 * row..3 * row + cg.positions.len()].copy_from_slice(&cg.positions);
                row += cg.active.len();
            }
            plane_slices.par_iter_mut().enumerate().for_each(|(p, g)| {
                for cg in &chunks {
                    let active = cg.active.iter().filter(|a| **a).count();
                    for k in 0..active {
                        let (index, weight) = cg.stencils[k * n_planes + p];
                        let dq = &cg.dq[(k * n_planes + p) * d..(k * n_planes + p + 1) * d];
                        for c in 0..4 {
                            if weight[c] == 0.0 {
                                continue;
                            }
                            for (gv, q) in g[index[c]..index[c] + d].iter_mut().zip(dq) {
                                *gv += weight[c] * q;
                            }
                        }
                    }
                }
            });
        }
        Ok(FieldGrads {
            params: grads,
            positions: grad_pos,
        })
    }

    /// Sum over planes of each plane's mean squared neighbour difference.
    pub fn tv_loss(&self) -> f64 {
        (0..self.layout.planes.len()).map(|p| self.plane(p).total_variation()).sum()
    }

    /// Adds `weight * d(tv_loss)/d(params)` into `grads` and returns the loss.
    pub fn tv_backward(&self, weight: f64, grads: &mut [f64]) -> f64 {
        assert_eq!(grads.len(), self.params.len(), "gradient buffer size");
        let d = self.config.hidden_dim;
        let (_, plane_grads) = grads.split_at_mut(self.layout.mlp_len);
        let mut slices: Vec<&mut [f64]> = Vec::with_capacity(self.layout.planes.len());
        let mut rest = plane_grads;
        for slot in &self.layout.planes {
            let (head, tail) = rest.split_at_mut(slot.len(d));
            slices.push(head);
            rest = tail;
        }
        let terms: Vec<f64> = slices
            .par_iter_mut()
            .enumerate()
            .map(|(p, g)| {
                let plane = self.plane(p);
                let count = plane.tv_count();
                if count == 0 {
                    return 0.0;
                }
                let (sum, _) = plane.tv_terms(Some(g), weight / count as f64);
                sum / count as f64
            })
            .collect();
        terms.iter().sum()
    }

    fn forward_one(&self, xyz: [f64; 3], t: f64, w: &mut Work, with_heads: bool) {
        let d = self.config.hidden_dim;
        let (coords, slope) = self.bounds.normalize_with_slope(xyz, t);
        w.coords = coords;
        w.slope = slope;
        for (p, slot) in self.layout.planes.iter().enumerate() {
            let plane = self.plane(p);
            let st = plane.stencil(coords[slot.axes.0], coords[slot.axes.1]);
            plane.gather(&st, &mut w.q[p * d..(p + 1) * d]);
            w.stencils[p] = st;
        }
        for s in 0..self.config.scales.len() {
            let z = &mut w.z[s * d..(s + 1) * d];
            z.copy_from_slice(&w.q[s * 6 * d..(s * 6 + 1) * d]);
            for p in 1..6 {
                let q = &w.q[(s * 6 + p) * d..(s * 6 + p + 1) * d];
                for (a, b) in z.iter_mut().zip(q) {
                    *a *= b;
                }
            }
        }
        self.layout.merge.forward(&self.params, &w.z, &mut w.hm, &mut w.f);
        if with_heads {
            self.heads(w);
        }
    }

    fn heads(&self, w: &mut Work) {
        let l = &self.layout;
        l.head_x.forward(&self.params, &w.f, &mut w.hx, &mut w.dx);
        if self.config.defer_color {
            w.dc.fill(0.0);
        } else {
            l.head_sh.forward(&self.params, &w.f, &mut w.hc, &mut w.dc);
        }
        l.head_sem.forward(&self.params, &w.f, &mut w.hs, &mut w.sem);
    }

    /// Accumulates MLP gradients, fills `b.dq` and returns the canonical
    /// position gradient.
    fn backward_one(&self, w: &Work, b: &mut BackWork, mlp_grads: &mut [f64]) -> [f64; 3] {
        let l = &self.layout;
        let d = self.config.hidden_dim;
        let params = &self.params;
        b.df.fill(0.0);
        let mut add_head = |head: &TwoLayer, hidden: &[f64], dy: &[f64], b_tmp: &mut [f64], scratch: &mut [f64], df: &mut [f64]| {
            if dy.iter().all(|v| *v == 0.0) {
                return;
            }
            head.backward(params, &w.f, hidden, dy, mlp_grads, scratch, Some(b_tmp));
            for (a, v) in df.iter_mut().zip(b_tmp.iter()) {
                *a += v;
            }
        };
        add_head(&l.head_x, &w.hx, &b.gdx, &mut b.tmp, &mut b.scratch, &mut b.df);
        if !self.config.defer_color {
            add_head(&l.head_sh, &w.hc, &b.gdc, &mut b.tmp, &mut b.scratch, &mut b.df);
        }
        add_head(&l.head_sem, &w.hs, &b.gsem, &mut b.tmp, &mut b.scratch, &mut b.df);
        l.merge.backward(params, &w.z, &w.hm, &b.df, mlp_grads, &mut b.scratch, Some(&mut b.dz));

        // Hadamard product: each factor's gradient is the product of the
        // other five, built from prefix and suffix products.
        for s in 0..self.config.scales.len() {
            for k in 0..d {
                let g = b.dz[s * d + k];
                let q = |p: usize| w.q[(s * 6 + p) * d + k];
                let mut prefix = [1.0; 7];
                let mut suffix = [1.0; 7];
                for p in 0..6 {
                    prefix[p + 1] = prefix[p] * q(p);
                    suffix[5 - p] = suffix[6 - p] * q(5 - p);
                }
                for p in 0..6 {
                    b.dq[(s * 6 + p) * d + k] = g * prefix[p] * suffix[p + 1];
                }
            }
        }

        let mut g_coord = [0.0; 4];
        for (p, slot) in l.planes.iter().enumerate() {
            let st = &w.stencils[p];
            let plane = self.plane(p);
            let dq = &b.dq[p * d..(p + 1) * d];
            let (mut gu, mut gv) = (0.0, 0.0);
            for c in 0..4 {
                let (wu, wv) = (st.d_weight_du[c], st.d_weight_dv[c]);
                if wu == 0.0 && wv == 0.0 {
                    continue;
                }
                let corner = &plane.data[st.index[c]..st.index[c] + d];
                let dot: f64 = corner.iter().zip(dq).map(|(a, b)| a * b).sum();
                gu += wu * dot;
                gv += wv * dot;
            }
            g_coord[slot.axes.0] += gu;
            g_coord[slot.axes.1] += gv;
        }
        let mut gp = [0.0; 3];
        for a in 0..3 {
            // Offsets are added to the canonical position directly.
            gp[a] = b.gdx[a] + g_coord[a] * w.slope[a];
        }
        gp
    }
}

/// Forward intermediates for one Gaussian.
struct Work {
    coords: [f64; 4],
    slope: [f64; 4],
    stencils: Vec<Stencil>,
    q: Vec<f64>,
    z: Vec<f64>,
    hm: Vec<f64>,
    f: Vec<f64>,
    hx: Vec<f64>,
    hc: Vec<f64>,
    hs: Vec<f64>,
    dx: [f64; 3],
    dc: Vec<f64>,
    sem: Vec<f64>,
}

impl Work {
    fn new(field: &HexPlaneField) -> Self {
        let c = &field.config;
        let n_planes = field.layout.planes.len();
        let empty = Stencil {
            index: [0; 4],
            frac: [0.0; 2],
            weight: [0.0; 4],
            d_weight_du: [0.0; 4],
            d_weight_dv: [0.0; 4],
        };
        Self {
            coords: [0.0; 4],
            slope: [0.0; 4],
            stencils: vec![empty; n_planes],
            q: vec![0.0; n_planes * c.hidden_dim],
            z: vec![0.0; c.scales.len() * c.hidden_dim],
            hm: vec![0.0; c.merge_width],
            f: vec![0.0; c.feature_dim],
            hx: vec![0.0; c.head_width],
            hc: vec![0.0; c.head_width],
            hs: vec![0.0; c.head_width],
            dx: [0.0; 3],
            dc: vec![0.0; 3 * sh_basis_len(field.sh_degree)],
            sem: vec![0.0; c.semantic_dim],
        }
    }
}

/// Backward scratch for one Gaussian.
struct BackWork {
    gdx: Vec<f64>,
    gdc: Vec<f64>,
    gsem: Vec<f64>,
    df: Vec<f64>,
    tmp: Vec<f64>,
    dz: Vec<f64>,
    dq: Vec<f64>,
    scratch: Vec<f64>,
}

impl BackWork {
    fn new(field: &HexPlaneField) -> Self {
        let c = &field.config;
        Self {
            gdx: vec![0.0; 3],
            gdc: vec![0.0; 3 * sh_basis_len(field.sh_degree)],
            gsem: vec![0.0; c.semantic_dim],
            df: vec![0.0; c.feature_dim],
            tmp: vec![0.0; c.feature_dim],
            dz: vec![0.0; c.scales.len() * c.hidden_dim],
            dq: vec![0.0; field.layout.planes.len() * c.hidden_dim],
            scratch: vec![0.0; c.merge_width.max(c.head_width)],
        }
    }
}

struct ChunkGrads {
    mlp: Vec<f64>,
    positions: Vec<f64>,
    /// `(index, weight)` per active Gaussian and plane.
    stencils: Vec<([usize; 4], [f64; 4])>,
    dq: Vec<f64>,
    active: Vec<bool>,
}
