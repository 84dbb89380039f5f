//! Factored plane grids: bilinear lookup and total variation.

/// The six axis pairs over `(x, y, z, t)`; the first three are spatial only.
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];

/// Index of the first spatial-temporal plane in [`PLANE_AXES`].
pub const FIRST_TEMPORAL_PLANE: usize = 3;

/// Borrowed view of one feature plane, stored `[u][v][feature]`.
#[derive(Clone, Copy, Debug)]
pub struct PlaneRef<'a> {
    pub res_u: usize,
    pub res_v: usize,
    pub dim: usize,
    pub data: &'a [f64],
}

/// Bilinear stencil: four lattice offsets (`[u0v0, u1v0, u0v1, u1v1]`)
/// with their weights, plus the weights' derivatives w.r.t. the normalized
/// coordinates.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    pub index: [usize; 4],
    pub frac: [f64; 2],
    pub weight: [f64; 4],
    pub d_weight_du: [f64; 4],
    pub d_weight_dv: [f64; 4],
}

/// Lower vertex, upper vertex, fractional offset in `[0, 1)` and the
/// derivative of the lattice coordinate w.r.t. the normalized one.
fn axis_cell(coord: f64, res: usize) -> (usize, usize, f64, f64) {
    if res < 2 {
        return (0, 0, 0.0, 0.0);
    }
    let span = (res - 1) as f64;
    let mut g = coord.clamp(0.0, 1.0) * span;
    let r = g.round();
    // Snap coordinates that are a rounding error away from a vertex.
    if (g - r).abs() <= 4.0 * f64::EPSILON * r.max(1.0) {
        g = r;
    }
    let i0 = (g.floor() as usize).min(res - 1);
    if i0 == res - 1 {
        // Last vertex: no cell beyond it, so no slope either.
        return (i0, i0, 0.0, 0.0);
    }
    (i0, i0 + 1, g - i0 as f64, span)
}

impl<'a> PlaneRef<'a> {
    pub fn stencil(&self, u: f64, v: f64) -> Stencil {
        let (u0, u1, fu, su) = axis_cell(u, self.res_u);
        let (v0, v1, fv, sv) = axis_cell(v, self.res_v);
        let at = |a: usize, b: usize| (a * self.res_v + b) * self.dim;
        Stencil {
            index: [at(u0, v0), at(u1, v0), at(u0, v1), at(u1, v1)],
            frac: [fu, fv],
            weight: [(1.0 - fu) * (1.0 - fv), fu * (1.0 - fv), (1.0 - fu) * fv, fu * fv],
            d_weight_du: [-(1.0 - fv) * su, (1.0 - fv) * su, -fv * su, fv * su],
            d_weight_dv: [-(1.0 - fu) * sv, -fu * sv, (1.0 - fu) * sv, fu * sv],
        }
    }

    /// Bilinear interpolation at normalized `(u, v)` into `out[..dim]`.
    ///
    /// Lattice vertices sit at `u * (res_u - 1)`; a query exactly on a
    /// vertex returns the stored vector unchanged.
    pub fn query_into(&self, u: f64, v: f64, out: &mut [f64]) {
        let st = self.stencil(u, v);
        self.gather(&st, out);
    }

    pub fn query(&self, u: f64, v: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        self.query_into(u, v, &mut out);
        out
    }

    /// Nested lerps, `v` first: a plane constant along `v` yields exactly
    /// the same result for every `v`, and vertices are reproduced exactly.
    pub(crate) fn gather(&self, st: &Stencil, out: &mut [f64]) {
        let d = self.dim;
        let [fu, fv] = st.frac;
        let c00 = &self.data[st.index[0]..st.index[0] + d];
        let c10 = &self.data[st.index[1]..st.index[1] + d];
        let c01 = &self.data[st.index[2]..st.index[2] + d];
        let c11 = &self.data[st.index[3]..st.index[3] + d];
        for k in 0..d {
            let e0 = c00[k] + fv * (c01[k] - c00[k]);
            let e1 = c10[k] + fv * (c11[k] - c10[k]);
            out[k] = e0 + fu * (e1 - e0);
        }
    }

    /// Mean squared difference between lattice neighbours along both axes.
    pub fn total_variation(&self) -> f64 {
        let (sum, count) = self.tv_terms(None, 0.0);
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// Returns `(sum of squared differences, number of differences)` and,
    /// when `grad` is given, adds `scale * d(sum)/d(entry)` to it.
    pub(crate) fn tv_terms(&self, mut grad: Option<&mut [f64]>, scale: f64) -> (f64, usize) {
        let (ru, rv, d) = (self.res_u, self.res_v, self.dim);
        let mut sum = 0.0;
        let mut count = 0;
        let mut visit = |a: usize, b: usize| {
            for k in 0..d {
                let diff = self.data[a + k] - self.data[b + k];
                sum += diff * diff;
                if let Some(g) = grad.as_deref_mut() {
                    g[a + k] += 2.0 * diff * scale;
                    g[b + k] -= 2.0 * diff * scale;
                }
            }
            count += d;
        };
        for i in 0..ru {
            for j in 0..rv {
                let here = (i * rv + j) * d;
                if i + 1 < ru {
                    visit(((i + 1) * rv + j) * d, here);
                }
                if j + 1 < rv {
                    visit((i * rv + j + 1) * d, here);
                }
            }
        }
        (sum, count)
    }

    /// Number of neighbour differences [`Self::total_variation`] averages.
    pub fn tv_count(&self) -> usize {
        (self.res_u.saturating_sub(1) * self.res_v + self.res_u * self.res_v.saturating_sub(1)) * self.dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(ru: usize, rv: usize, d: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..ru * rv * d).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn vertices_are_exact() {
        let (ru, rv, d) = (64, 50, 4);
        let data = random_plane(ru, rv, d, 1);
        let p = PlaneRef { res_u: ru, res_v: rv, dim: d, data: &data };
        for i in 0..ru {
            for j in (0..rv).step_by(7) {
                let u = i as f64 / (ru - 1) as f64;
                let v = j as f64 / (rv - 1) as f64;
                let want = &data[(i * rv + j) * d..(i * rv + j + 1) * d];
                assert_eq!(p.query(u, v), want, "vertex ({i},{j})");
            }
        }
    }

    #[test]
    fn constant_along_v_is_exactly_invariant() {
        let (ru, rv, d) = (9, 12, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let column: Vec<f64> = (0..ru * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut data = vec![0.0; ru * rv * d];
        for i in 0..ru {
            for j in 0..rv {
                data[(i * rv + j) * d..(i * rv + j + 1) * d].copy_from_slice(&column[i * d..(i + 1) * d]);
            }
        }
        let p = PlaneRef { res_u: ru, res_v: rv, dim: d, data: &data };
        let base = p.query(0.37, 0.0);
        for k in 1..50 {
            assert_eq!(p.query(0.37, k as f64 / 49.0 * 0.999), base);
        }
    }

    #[test]
    fn cell_midpoint_is_corner_mean() {
        let (ru, rv, d) = (5, 4, 3);
        let data = random_plane(ru, rv, d, 2);
        let p = PlaneRef { res_u: ru, res_v: rv, dim: d, data: &data };
        let q = p.query(2.5 / 4.0, 1.5 / 3.0);
        for k in 0..d {
            let at = |i: usize, j: usize| data[(i * rv + j) * d + k];
            let mean = (at(2, 1) + at(3, 1) + at(2, 2) + at(3, 2)) / 4.0;
            assert!((q[k] - mean).abs() < 1e-14);
        }
    }

    #[test]
    fn tv_two_samples() {
        let data = [1.0, 2.0, -1.0, 4.0, 0.0, 1.0];
        let p = PlaneRef { res_u: 1, res_v: 2, dim: 3, data: &data };
        let want = ((1.0f64 - 4.0).powi(2) + (2.0f64 - 0.0).powi(2) + (-1.0f64 - 1.0).powi(2)) / 3.0;
        assert!((p.total_variation() - want).abs() < 1e-15);
        let flat = [0.7; 24];
        assert_eq!(PlaneRef { res_u: 4, res_v: 2, dim: 3, data: &flat }.total_variation(), 0.0);
    }

    #[test]
    fn tv_count_matches_terms() {
        let data = random_plane(6, 3, 2, 3);
        let p = PlaneRef { res_u: 6, res_v: 3, dim: 2, data: &data };
        assert_eq!(p.tv_terms(None, 0.0).1, p.tv_count());
    }

    proptest! {
        #[test]
        fn weights_partition_unity(u in 0.0f64..=1.0, v in 0.0f64..=1.0, ru in 1usize..70, rv in 1usize..70) {
            let data = vec![0.0; ru * rv];
            let st = PlaneRef { res_u: ru, res_v: rv, dim: 1, data: &data }.stencil(u, v);
            prop_assert!((st.weight.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(st.weight.iter().all(|w| *w >= 0.0));
        }

        #[test]
        fn query_within_corner_hull(u in 0.0f64..=1.0, v in 0.0f64..=1.0, seed in 0u64..1000) {
            let (ru, rv, d) = (7, 9, 5);
            let data = random_plane(ru, rv, d, seed);
            let p = PlaneRef { res_u: ru, res_v: rv, dim: d, data: &data };
            let q = p.query(u, v);
            // Oracle: locate the cell independently and bound by its corners.
            let gi = ((u * 6.0).floor() as usize).min(5);
            let gj = ((v * 8.0).floor() as usize).min(7);
            for k in 0..d {
                let corners = [(gi, gj), (gi + 1, gj), (gi, gj + 1), (gi + 1, gj + 1)]
                    .map(|(i, j)| data[(i * rv + j) * d + k]);
                let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(q[k] >= lo - 1e-12 && q[k] <= hi + 1e-12);
            }
        }
    }
}
