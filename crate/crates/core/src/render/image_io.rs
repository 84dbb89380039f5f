use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Encodes an `H x W x 3` buffer as 8-bit PNG, clamping to `[0, 1]`.
pub fn rgb_to_png_bytes(rgb: &[f64], width: usize, height: usize) -> Result<Vec<u8>> {
    if rgb.len() != 3 * width * height {
        return Err(Error::invalid("rgb buffer does not match image size"));
    }
    let bytes: Vec<u8> = rgb.iter().map(|&v| to_u8(v)).collect();
    let img = image::RgbImage::from_raw(width as u32, height as u32, bytes)
        .ok_or_else(|| Error::invalid("rgb buffer does not match image size"))?;
    let mut out = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut out), image::ImageFormat::Png)?;
    Ok(out)
}

pub fn save_rgb_png(path: &Path, rgb: &[f64], width: usize, height: usize) -> Result<()> {
    std::fs::write(path, rgb_to_png_bytes(rgb, width, height)?)?;
    Ok(())
}

/// Writes a little-endian float32 array in NPY v1.0 format.
pub fn save_npy(path: &Path, data: &[f64], shape: &[usize]) -> Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(Error::invalid("npy shape does not match data length"));
    }
    let dims = match shape {
        [d] => format!("({d},)"),
        _ => format!(
            "({})",
            shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut header = format!("{{'descr': '<f4', 'fortran_order': False, 'shape': {dims}, }}");
    // Magic (6) + version (2) + header length (2) + header, padded to 64.
    let pad = (64 - (10 + header.len() + 1) % 64) % 64;
    header.push_str(&" ".repeat(pad));
    header.push('\n');
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"\x93NUMPY\x01\x00")?;
    f.write_all(&(header.len() as u16).to_le_bytes())?;
    f.write_all(header.as_bytes())?;
    for v in data {
        f.write_all(&(*v as f32).to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}
