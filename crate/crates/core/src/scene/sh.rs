//! Real spherical harmonics up to degree 3, in the sign convention used by
//! common Gaussian splatting renderers.

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_SH_DEGREE: usize = 3;

/// Number of basis functions for SH degree `degree`.
pub const fn sh_basis_len(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Writes the basis values for `dir` into `out[..(degree+1)^2]`.
pub fn sh_basis(degree: usize, dir: [f64; 3], out: &mut [f64]) {
    assert!(degree <= MAX_SH_DEGREE, "SH degree {degree} unsupported");
    let [x, y, z] = dir;
    out[0] = C0;
    if degree == 0 {
        return;
    }
    out[1] = -C1 * y;
    out[2] = C1 * z;
    out[3] = -C1 * x;
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    out[4] = C2[0] * xy;
    out[5] = C2[1] * yz;
    out[6] = C2[2] * (2.0 * zz - xx - yy);
    out[7] = C2[3] * xz;
    out[8] = C2[4] * (xx - yy);
    if degree == 2 {
        return;
    }
    out[9] = C3[0] * y * (3.0 * xx - yy);
    out[10] = C3[1] * xy * z;
    out[11] = C3[2] * y * (4.0 * zz - xx - yy);
    out[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy);
    out[13] = C3[4] * x * (4.0 * zz - xx - yy);
    out[14] = C3[5] * z * (xx - yy);
    out[15] = C3[6] * x * (xx - 3.0 * yy);
}

/// Contracts `basis[..n]` with `[basis][channel]` coefficients and adds the
/// 0.5 offset. The result is not clamped.
pub(crate) fn sh_contract(coeffs: &[f64], basis: &[f64], n: usize) -> [f64; 3] {
    let mut rgb = [0.5; 3];
    for (b, &y) in basis[..n].iter().enumerate() {
        for (ch, c) in rgb.iter_mut().enumerate() {
            *c += y * coeffs[3 * b + ch];
        }
    }
    rgb
}

/// View-dependent RGB of one Gaussian, clamped at zero from below.
pub fn eval_sh(coeffs: &[f64], view_dir: [f64; 3], degree: usize) -> [f64; 3] {
    let mut basis = [0.0; sh_basis_len(MAX_SH_DEGREE)];
    sh_basis(degree, view_dir, &mut basis);
    sh_contract(coeffs, &basis, sh_basis_len(degree)).map(|c| c.max(0.0))
}

/// DC coefficient that makes `eval_sh` return `rgb` at degree 0.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / C0
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn dc_only() {
        let c = [1.0, -0.5, 2.0];
        let rgb = eval_sh(&c, [0.0, 0.0, 1.0], 0);
        for ch in 0..3 {
            assert!((rgb[ch] - (0.282_094_79 * c[ch] + 0.5).max(0.0)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_coefficients_give_grey() {
        let c = [0.0; 48];
        assert_eq!(eval_sh(&c, [0.6, 0.0, 0.8], 3), [0.5, 0.5, 0.5]);
    }

    #[test]
    fn z_linear_term_flips_with_direction() {
        let mut c = [0.0; 12];
        let coeff = 0.3;
        c[3 * 2..3 * 2 + 3].copy_from_slice(&[coeff; 3]);
        let up = eval_sh(&c, [0.0, 0.0, 1.0], 1);
        let down = eval_sh(&c, [0.0, 0.0, -1.0], 1);
        for ch in 0..3 {
            assert!((up[ch] - down[ch] - 2.0 * 0.488_602_51 * coeff).abs() < 1e-8);
        }
    }

    #[test]
    fn rgb_dc_roundtrip() {
        for v in [0.0, 0.25, 1.0] {
            let dc = rgb_to_dc(v);
            assert!((eval_sh(&[dc, dc, dc], [1.0, 0.0, 0.0], 0)[0] - v).abs() < 1e-12);
        }
    }

    proptest! {
        // Linear up to the +0.5 offset while no channel is clamped.
        #[test]
        fn linear_in_coefficients(
            c1 in proptest::collection::vec(-0.005f64..0.005, 48),
            c2 in proptest::collection::vec(-0.005f64..0.005, 48),
            a in -1.0f64..1.0,
            b in -1.0f64..1.0,
            theta in 0.0f64..std::f64::consts::PI,
            phi in 0.0f64..(2.0 * std::f64::consts::PI),
        ) {
            let dir = [theta.sin() * phi.cos(), theta.sin() * phi.sin(), theta.cos()];
            let mix: Vec<f64> = c1.iter().zip(&c2).map(|(x, y)| a * x + b * y).collect();
            let e = |c: &[f64]| eval_sh(c, dir, 3).map(|v| v - 0.5);
            let (m, e1, e2) = (e(&mix), e(&c1), e(&c2));
            for ch in 0..3 {
                prop_assert!((m[ch] - (a * e1[ch] + b * e2[ch])).abs() < 1e-12);
            }
        }
    }
}
