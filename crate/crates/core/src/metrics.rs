//! Image quality metrics, whole-image and restricted to a pixel mask.

use crate::loss::{ssim, ssim_map, SSIM_WINDOW};
use crate::{Error, Result};

/// `10 log10(1 / MSE)` for images in `[0, 1]`; identical images give
/// `f64::INFINITY`.
pub fn psnr(render: &[f64], target: &[f64]) -> Result<f64> {
    if render.len() != target.len() || render.is_empty() {
        return Err(Error::invalid("psnr: images must be non-empty and equally sized"));
    }
    let mse = render.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / render.len() as f64;
    Ok(psnr_from_mse(mse))
}

fn psnr_from_mse(mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    }
}

fn check_mask(len: usize, mask: &[bool], channels: usize) -> Result<()> {
    if channels == 0 || mask.len() * channels != len {
        return Err(Error::invalid(format!(
            "mask has {} pixels but the image holds {len} values",
            mask.len()
        )));
    }
    if !mask.iter().any(|m| *m) {
        return Err(Error::invalid("mask selects no pixels"));
    }
    Ok(())
}

/// PSNR over the pixels where `mask` is set; images are interleaved with
/// `channels` values per pixel.
pub fn masked_psnr(render: &[f64], target: &[f64], mask: &[bool], channels: usize) -> Result<f64> {
    if render.len() != target.len() {
        return Err(Error::invalid("masked psnr: images differ in size"));
    }
    check_mask(render.len(), mask, channels)?;
    let mut sse = 0.0;
    let mut count = 0usize;
    for (p, _) in mask.iter().enumerate().filter(|(_, m)| **m) {
        for c in 0..channels {
            let d = render[p * channels + c] - target[p * channels + c];
            sse += d * d;
        }
        count += channels;
    }
    Ok(psnr_from_mse(sse / count as f64))
}

/// Whole-image SSIM.
pub fn ssim_metric(render: &[f64], target: &[f64], width: usize, height: usize, channels: usize) -> Result<f64> {
    ssim(render, target, width, height, channels)
}

/// Mean SSIM over the windows whose centre pixel lies in `mask`. `None`
/// when no full window is centred inside the mask.
pub fn masked_ssim(
    render: &[f64],
    target: &[f64],
    mask: &[bool],
    width: usize,
    height: usize,
    channels: usize,
) -> Result<Option<f64>> {
    check_mask(render.len(), mask, channels)?;
    let map = ssim_map(render, target, width, height, channels)?;
    let half = SSIM_WINDOW / 2;
    let ow = width + 1 - SSIM_WINDOW;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, s) in map.iter().enumerate() {
        let (x, y) = (i % ow + half, i / ow + half);
        if mask[y * width + x] {
            sum += s;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_examples() {
        let a = vec![0.5; 300];
        let b = vec![0.6; 300];
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b[..10]).is_err());
    }

    #[test]
    fn full_mask_equals_unmasked() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a: Vec<f64> = (0..12 * 12 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..12 * 12 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let mask = vec![true; 144];
        assert!((masked_psnr(&a, &b, &mask, 3).unwrap() - psnr(&a, &b).unwrap()).abs() < 1e-12);
        assert!(masked_psnr(&a, &b, &[false; 144], 3).is_err());
        let s = masked_ssim(&a, &b, &mask, 12, 12, 3).unwrap().unwrap();
        assert!((s - ssim_metric(&a, &b, 12, 12, 3).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn masked_psnr_matches_crop() {
        let (w, h) = (20, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        let b: Vec<f64> = (0..w * h * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        // Rectangle mask: compare against psnr of the cropped sub-images.
        let (x0, x1, y0, y1) = (4, 13, 2, 9);
        let mut mask = vec![false; w * h];
        let (mut ca, mut cb) = (Vec::new(), Vec::new());
        for y in y0..y1 {
            for x in x0..x1 {
                mask[y * w + x] = true;
                ca.extend_from_slice(&a[(y * w + x) * 3..(y * w + x + 1) * 3]);
                cb.extend_from_slice(&b[(y * w + x) * 3..(y * w + x + 1) * 3]);
            }
        }
        assert!((masked_psnr(&a, &b, &mask, 3).unwrap() - psnr(&ca, &cb).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn masked_ssim_without_interior_windows_is_none() {
        let a = vec![0.2; 16 * 16];
        let mut mask = vec![false; 256];
        mask[0] = true;
        assert_eq!(masked_ssim(&a, &a, &mask, 16, 16, 1).unwrap(), None);
        mask[8 * 16 + 8] = true;
        assert!((masked_ssim(&a, &a, &mask, 16, 16, 1).unwrap().unwrap() - 1.0).abs() < 1e-12);
    }
}
