//! Binary model container.
//!
//! Layout (all little-endian):
//!
//! ```text
//! "S3GS" | u32 version | u64 N | u32 sh_degree | u32 active_sh_degree
//! f64 positions[3N] log_scales[3N] rotations[4N] opacity_logits[N] sh_coeffs[N*3*(k+1)^2]
//! u32 section_count, then per section: [u8; 4] tag | u64 byte_len | payload
//! ```
//!
//! Sections: `FLD0` holds a field (u64 header length, JSON header with
//! config, bounds and SH degree, u64 parameter count, f64 parameters) and
//! `META` holds free-form JSON.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::field::{FieldConfig, HexPlaneField, SceneBounds};
use crate::scene::GaussianSet;
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"S3GS";
pub const VERSION: u32 = 1;
const FIELD_TAG: &[u8; 4] = b"FLD0";
const META_TAG: &[u8; 4] = b"META";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub scene: GaussianSet,
    pub field: Option<HexPlaneField>,
    pub meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FieldHeader {
    config: FieldConfig,
    bounds: SceneBounds,
    sh_degree: usize,
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    out.reserve(v.len() * 8);
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| Error::Format("array length overflows".into()))?;
        Ok(self
            .take(bytes)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

impl Checkpoint {
    pub fn new(scene: GaussianSet, field: Option<HexPlaneField>) -> Self {
        Self {
            scene,
            field,
            meta: serde_json::Value::Null,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let s = &self.scene;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(s.len() as u64).to_le_bytes());
        out.extend_from_slice(&(s.sh_degree as u32).to_le_bytes());
        out.extend_from_slice(&(s.active_sh_degree as u32).to_le_bytes());
        for arr in [&s.positions, &s.log_scales, &s.rotations, &s.opacity_logits, &s.sh_coeffs] {
            put_f64s(&mut out, arr);
        }
        let mut sections: Vec<(&[u8; 4], Vec<u8>)> = Vec::new();
        if let Some(f) = &self.field {
            let header = serde_json::to_vec(&FieldHeader {
                config: f.config().clone(),
                bounds: *f.bounds(),
                sh_degree: f.sh_degree(),
            })?;
            let mut p = Vec::new();
            p.extend_from_slice(&(header.len() as u64).to_le_bytes());
            p.extend_from_slice(&header);
            p.extend_from_slice(&(f.param_count() as u64).to_le_bytes());
            put_f64s(&mut p, f.params());
            sections.push((FIELD_TAG, p));
        }
        if !self.meta.is_null() {
            sections.push((META_TAG, serde_json::to_vec(&self.meta)?));
        }
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        for (tag, payload) in sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {version} is not supported (expected {VERSION})"
            )));
        }
        let n = r.len()?;
        let k = r.u32()? as usize;
        let active = r.u32()? as usize;
        if k > 3 || active > k {
            return Err(Error::Format(format!("bad SH degrees {active}/{k}")));
        }
        let stride = 3 * (k + 1) * (k + 1);
        let scene = GaussianSet {
            positions: r.f64s(3 * n)?,
            log_scales: r.f64s(3 * n)?,
            rotations: r.f64s(4 * n)?,
            opacity_logits: r.f64s(n)?,
            sh_coeffs: r.f64s(stride * n)?,
            sh_degree: k,
            active_sh_degree: active,
        };
        scene.validate()?;
        let mut ck = Self::new(scene, None);
        let count = r.u32()?;
        for _ in 0..count {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = r.len()?;
            let payload = r.take(len)?;
            let mut p = Reader { buf: payload, pos: 0 };
            match &tag {
                FIELD_TAG => {
                    let hlen = p.len()?;
                    let header: FieldHeader = serde_json::from_slice(p.take(hlen)?)?;
                    let count = p.len()?;
                    let params = p.f64s(count)?;
                    ck.field = Some(HexPlaneField::from_parts(header.config, header.bounds, header.sh_degree, params)?);
                }
                META_TAG => ck.meta = serde_json::from_slice(payload)?,
                // Unknown sections are skipped so newer writers stay readable.
                _ => {}
            }
        }
        if r.pos != buf.len() {
            return Err(Error::Format("trailing bytes after the last section".into()));
        }
        Ok(ck)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let name = path
            .file_name()
            .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
        let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::load(path, None, e.to_string()))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::load(path, None, m),
            other => other,
        })
    }
}
