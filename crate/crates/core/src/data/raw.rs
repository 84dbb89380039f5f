//! Sidecar formats: shaped float32 arrays and 1-bit mask PNGs.
//!
//! A float sidecar is two little-endian `u32`s (`rows`, `cols`) followed by
//! `rows * cols * channels` little-endian `f32` values, where `channels` is
//! implied by the file length.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

pub fn write_raw_f32(path: &Path, rows: usize, cols: usize, data: &[f32]) -> Result<()> {
    if rows * cols == 0 || data.len() % (rows * cols) != 0 {
        return Err(Error::invalid(format!(
            "{} values do not tile a {rows}x{cols} array",
            data.len()
        )));
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(&(rows as u32).to_le_bytes())?;
    w.write_all(&(cols as u32).to_le_bytes())?;
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_raw_f32(path: &Path) -> Result<RawArray> {
    let bytes = fs::read(path).map_err(|e| Error::load(path, None, e.to_string()))?;
    if bytes.len() < 8 {
        return Err(Error::load(path, None, "missing shape header"));
    }
    let rows = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload = &bytes[8..];
    let cells = rows * cols;
    if cells == 0 || payload.len() % 4 != 0 || (payload.len() / 4) % cells != 0 {
        return Err(Error::load(
            path,
            None,
            format!("payload of {} bytes does not match shape {rows}x{cols}", payload.len()),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::load(path, Some(i), "non-finite value"));
    }
    Ok(RawArray {
        rows,
        cols,
        channels: data.len() / cells,
        data,
    })
}

/// Writes a row-major boolean mask as a 1-bit greyscale PNG.
pub fn write_mask_png(path: &Path, mask: &[bool], width: usize, height: usize) -> Result<()> {
    if mask.len() != width * height {
        return Err(Error::invalid("mask size does not match its dimensions"));
    }
    let stride = width.div_ceil(8);
    let mut packed = vec![0u8; stride * height];
    for y in 0..height {
        for x in 0..width {
            if mask[y * width + x] {
                packed[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    let file = BufWriter::new(fs::File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header().map_err(|e| Error::Format(e.to_string()))?;
    writer.write_image_data(&packed).map_err(|e| Error::Format(e.to_string()))?;
    writer.finish().map_err(|e| Error::Format(e.to_string()))?;
    Ok(())
}

/// Reads a mask PNG; any non-zero grey value counts as set.
pub fn read_mask_png(path: &Path) -> Result<(Vec<bool>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::load(path, None, e.to_string()))?;
    let grey = img.to_luma8();
    let (w, h) = (grey.width() as usize, grey.height() as usize);
    Ok((grey.pixels().map(|p| p.0[0] > 0).collect(), w, h))
}

/// Reads an RGB(A) image as interleaved `[0, 1]` RGB.
pub fn read_rgb(path: &Path) -> Result<(Vec<f64>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::load(path, None, e.to_string()))?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    Ok((rgb.as_raw().iter().map(|v| *v as f64 / 255.0).collect(), w, h))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn raw_roundtrip_and_rejections() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let data: Vec<f32> = (0..24).map(|i| i as f32 * 0.5).collect();
        write_raw_f32(&p, 2, 4, &data).unwrap();
        let r = read_raw_f32(&p).unwrap();
        assert_eq!((r.rows, r.cols, r.channels), (2, 4, 3));
        assert_eq!(r.data, data);

        let mut bad = data.clone();
        bad[5] = f32::NAN;
        write_raw_f32(&p, 2, 4, &bad).unwrap();
        assert!(matches!(read_raw_f32(&p), Err(Error::Load { record: Some(5), .. })));
        fs::write(&p, [1, 0, 0, 0, 1, 0, 0, 0, 0, 0]).unwrap();
        assert!(read_raw_f32(&p).is_err());
        assert!(write_raw_f32(&p, 5, 5, &data).is_err());
    }

    #[test]
    fn mask_png_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let (w, h) = (13, 5);
        let mask: Vec<bool> = (0..w * h).map(|i| (i * 7) % 3 == 0).collect();
        write_mask_png(&p, &mask, w, h).unwrap();
        assert_eq!(read_mask_png(&p).unwrap(), (mask, w, h));
    }
}
