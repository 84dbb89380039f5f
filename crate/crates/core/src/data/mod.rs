//! Posed-frame datasets: manifest loading, splits and sidecar files.

mod boxes;
mod raw;
pub mod synth;

pub use boxes::{boxes_to_mask, convex_hull, Box3};
pub use raw::{read_mask_png, read_raw_f32, read_rgb, write_mask_png, write_raw_f32, RawArray};
pub use synth::{synthesize, SyntheticSceneSpec};

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::loss::DepthSample;
use crate::render::CameraModel;
use crate::scene::pointcloud::read_points;
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestBounds {
    pub aabb_min: [f64; 3],
    pub aabb_max: [f64; 3],
}

/// One posed image. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrameEntry {
    pub image: String,
    pub camera: CameraModel,
    /// Seconds.
    pub timestamp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<String>,
    /// Dynamic-region mask, evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    /// Dynamic-object boxes at this timestamp, evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub boxes: Option<Vec<Box3>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pointcloud: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<ManifestBounds>,
    pub frames: Vec<FrameEntry>,
}

/// A frame of a loaded dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    /// Position in the manifest.
    pub index: usize,
    pub entry: FrameEntry,
    /// Timestamp mapped affinely onto `[0, 1]` over the whole sequence.
    pub time: f64,
}

/// Pixel data of one frame, loaded on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameData {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<f64>,
    pub depth: Vec<DepthSample>,
    pub features: Option<Vec<f64>>,
    pub feature_dim: usize,
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct SceneDataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub frames: Vec<Frame>,
    pub points: Option<Vec<[f64; 3]>>,
}

fn normalized_times(frames: &[FrameEntry]) -> Vec<f64> {
    let t0 = frames.first().map_or(0.0, |f| f.timestamp);
    let t1 = frames.last().map_or(0.0, |f| f.timestamp);
    frames
        .iter()
        .map(|f| if t1 > t0 { (f.timestamp - t0) / (t1 - t0) } else { 0.0 })
        .collect()
}

/// Reads and validates a manifest (a file, or a directory holding
/// `manifest.json`). Pixel data stays on disk until [`SceneDataset::load_frame`].
pub fn load_manifest(path: &Path) -> Result<SceneDataset> {
    let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
    let text = fs::read_to_string(&file).map_err(|e| Error::load(&file, None, e.to_string()))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::load(&file, None, e.to_string()))?;
    let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
    SceneDataset::from_manifest(root, manifest, &file)
}

impl SceneDataset {
    fn from_manifest(root: PathBuf, manifest: Manifest, file: &Path) -> Result<Self> {
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::load(
                file,
                None,
                format!("unsupported manifest version {} (expected {MANIFEST_VERSION})", manifest.version),
            ));
        }
        if manifest.frames.is_empty() {
            return Err(Error::load(file, None, "manifest lists no frames"));
        }
        let mut prev = f64::NEG_INFINITY;
        for (i, f) in manifest.frames.iter().enumerate() {
            let fail = |msg: String| Error::load(file, Some(i), msg);
            if !f.timestamp.is_finite() || f.timestamp < prev {
                return Err(fail(format!("timestamp {} is not finite and nondecreasing", f.timestamp)));
            }
            prev = f.timestamp;
            f.camera.validate().map_err(|e| fail(format!("camera: {e}")))?;
            for rel in [Some(&f.image), f.depth.as_ref(), f.features.as_ref(), f.mask.as_ref()].into_iter().flatten() {
                if !root.join(rel).is_file() {
                    return Err(fail(format!("missing file {rel}")));
                }
            }
            for b in f.boxes.iter().flatten() {
                b.validate().map_err(|e| fail(format!("box: {e}")))?;
            }
        }
        let points = match &manifest.pointcloud {
            Some(rel) => {
                let p = root.join(rel);
                if !p.is_file() {
                    return Err(Error::load(file, None, format!("missing point cloud {rel}")));
                }
                Some(read_points(&p)?)
            }
            None => None,
        };
        let times = normalized_times(&manifest.frames);
        let frames = manifest
            .frames
            .iter()
            .zip(times)
            .enumerate()
            .map(|(index, (entry, time))| Frame {
                index,
                entry: entry.clone(),
                time,
            })
            .collect();
        Ok(Self {
            root,
            manifest,
            frames,
            points,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Normalized time of every manifest frame, including ones this
    /// dataset does not hold.
    pub fn sequence_times(&self) -> Vec<f64> {
        normalized_times(&self.manifest.frames)
    }

    pub fn cameras(&self) -> Vec<CameraModel> {
        self.frames.iter().map(|f| f.entry.camera.clone()).collect()
    }

    /// Loads image and sidecars of frame `i` (position in `self.frames`).
    pub fn load_frame(&self, i: usize) -> Result<FrameData> {
        let frame = &self.frames[i];
        let e = &frame.entry;
        let record = Some(frame.index);
        let path = |rel: &str| self.root.join(rel);
        let (rgb, width, height) = read_rgb(&path(&e.image))?;
        if width != e.camera.width || height != e.camera.height {
            return Err(Error::load(
                path(&e.image),
                record,
                format!(
                    "image is {width}x{height} but the camera expects {}x{}",
                    e.camera.width, e.camera.height
                ),
            ));
        }
        let mut depth = Vec::new();
        if let Some(rel) = &e.depth {
            let raw = read_raw_f32(&path(rel))?;
            if raw.cols != 3 || raw.channels != 1 {
                return Err(Error::load(path(rel), record, "depth sidecar must be N x 3 (x, y, metres)"));
            }
            for (k, s) in raw.data.chunks_exact(3).enumerate() {
                let (x, y) = (s[0], s[1]);
                if x < 0.0 || y < 0.0 || x as usize >= width || y as usize >= height || x.fract() != 0.0 || y.fract() != 0.0 {
                    return Err(Error::load(path(rel), Some(k), "depth sample outside the image"));
                }
                depth.push(DepthSample {
                    x: x as usize,
                    y: y as usize,
                    depth: s[2] as f64,
                });
            }
        }
        let (features, feature_dim) = match &e.features {
            Some(rel) => {
                let raw = read_raw_f32(&path(rel))?;
                if raw.rows != height || raw.cols != width {
                    return Err(Error::load(path(rel), record, "feature map size differs from the image"));
                }
                (Some(raw.data.iter().map(|v| *v as f64).collect()), raw.channels)
            }
            None => (None, 0),
        };
        let mask = if let Some(rel) = &e.mask {
            let (m, w, h) = read_mask_png(&path(rel))?;
            if w != width || h != height {
                return Err(Error::load(path(rel), record, "mask size differs from the image"));
            }
            Some(m)
        } else if let Some(boxes) = &e.boxes {
            Some(boxes_to_mask(boxes, &e.camera)?)
        } else {
            None
        };
        Ok(FrameData {
            width,
            height,
            rgb,
            depth,
            features,
            feature_dim,
            mask,
        })
    }

    /// Keeps the frames at the given positions (in order).
    pub fn subset(&self, keep: &[usize]) -> Self {
        Self {
            root: self.root.clone(),
            manifest: self.manifest.clone(),
            frames: keep.iter().map(|&i| self.frames[i].clone()).collect(),
            points: self.points.clone(),
        }
    }

    /// Writes the manifest of the frames currently held.
    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let m = Manifest {
            frames: self.frames.iter().map(|f| f.entry.clone()).collect(),
            ..self.manifest.clone()
        };
        write_manifest(&m, path)
    }
}

pub fn write_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(manifest)?)?;
    Ok(())
}

/// Frames whose manifest index is a multiple of `every_nth` form the test
/// split; the rest train.
pub fn split_train_test(dataset: &SceneDataset, every_nth: usize) -> Result<(SceneDataset, SceneDataset)> {
    if every_nth < 2 {
        return Err(Error::invalid("every_nth must be at least 2"));
    }
    let (test, train): (Vec<usize>, Vec<usize>) =
        (0..dataset.len()).partition(|&i| dataset.frames[i].index % every_nth == 0);
    Ok((dataset.subset(&train), dataset.subset(&test)))
}
