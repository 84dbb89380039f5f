//! Point-cloud prior readers: binary little-endian PLY and XYZ text.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::error::{Error, Result};

fn scalar_size(ty: &str) -> Option<usize> {
    Some(match ty {
        "char" | "uchar" | "int8" | "uint8" => 1,
        "short" | "ushort" | "int16" | "uint16" => 2,
        "int" | "uint" | "float" | "int32" | "uint32" | "float32" => 4,
        "double" | "float64" => 8,
        _ => return None,
    })
}

/// Reads a point cloud, choosing the format from the file extension
/// (`.ply` or anything else as whitespace-delimited XYZ).
pub fn read_points(path: &Path) -> Result<Vec<[f64; 3]>> {
    let file = std::fs::File::open(path).map_err(|e| Error::load(path, None, e.to_string()))?;
    let is_ply = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ply"));
    let pts = if is_ply {
        read_ply(BufReader::new(file))
    } else {
        read_xyz(BufReader::new(file))
    }
    .map_err(|e| Error::load(path, None, e.to_string()))?;
    if pts.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::load(path, None, "point cloud contains NaN/Inf"));
    }
    Ok(pts)
}

/// Parses a binary little-endian PLY whose vertex element carries
/// `float x`, `float y` and `float z`. Other vertex properties are skipped.
pub fn read_ply<R: BufRead>(mut r: R) -> Result<Vec<[f64; 3]>> {
    let mut line = String::new();
    r.read_line(&mut line)?;
    if line.trim() != "ply" {
        return Err(Error::Format("missing ply magic".into()));
    }
    let mut vertex_count = None;
    let mut in_vertex = false;
    let mut stride = 0usize;
    let mut offsets: [Option<usize>; 3] = [None; 3];
    loop {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("unterminated ply header".into()));
        }
        let toks: Vec<&str> = line.split_whitespace().collect();
        match toks.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] => {
                if *fmt != "binary_little_endian" {
                    return Err(Error::Format(format!("unsupported ply format {fmt}")));
                }
            }
            ["element", name, count] => {
                in_vertex = *name == "vertex";
                if in_vertex {
                    vertex_count = Some(
                        count
                            .parse::<usize>()
                            .map_err(|_| Error::Format("bad vertex count".into()))?,
                    );
                } else if vertex_count.is_none() {
                    return Err(Error::Format("vertex element must come first".into()));
                }
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::Format("list properties on vertices are unsupported".into()));
            }
            ["property", ty, name] if in_vertex => {
                let size = scalar_size(ty)
                    .ok_or_else(|| Error::Format(format!("unknown ply type {ty}")))?;
                let axis = match *name {
                    "x" => Some(0),
                    "y" => Some(1),
                    "z" => Some(2),
                    _ => None,
                };
                if let Some(a) = axis {
                    if !matches!(*ty, "float" | "float32") {
                        return Err(Error::Format(format!("property {name} must be float32")));
                    }
                    offsets[a] = Some(stride);
                }
                stride += size;
            }
            _ => {}
        }
    }
    let n = vertex_count.ok_or_else(|| Error::Format("no vertex element".into()))?;
    let [Some(ox), Some(oy), Some(oz)] = offsets else {
        return Err(Error::Format("vertex element lacks x/y/z".into()));
    };
    let mut buf = vec![0u8; stride];
    let mut pts = Vec::with_capacity(n);
    let read_f32 = |b: &[u8], o: usize| f32::from_le_bytes([b[o], b[o + 1], b[o + 2], b[o + 3]]) as f64;
    for _ in 0..n {
        r.read_exact(&mut buf)
            .map_err(|_| Error::Format("truncated ply body".into()))?;
        pts.push([read_f32(&buf, ox), read_f32(&buf, oy), read_f32(&buf, oz)]);
    }
    Ok(pts)
}

/// Parses whitespace-delimited text with at least three numbers per line;
/// blank lines and `#` comments are ignored.
pub fn read_xyz<R: BufRead>(r: R) -> Result<Vec<[f64; 3]>> {
    let mut pts = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let vals: Vec<f64> = body
            .split_whitespace()
            .take(3)
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Format(format!("line {}: not a number", lineno + 1)))?;
        if vals.len() < 3 {
            return Err(Error::Format(format!("line {}: expected x y z", lineno + 1)));
        }
        pts.push([vals[0], vals[1], vals[2]]);
    }
    Ok(pts)
}

/// Writes points as a binary little-endian PLY with float32 x/y/z.
pub fn write_ply<W: Write>(mut w: W, points: &[[f64; 3]]) -> Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nend_header\n",
        points.len()
    )?;
    for p in points {
        for v in p {
            w.write_all(&(*v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}
