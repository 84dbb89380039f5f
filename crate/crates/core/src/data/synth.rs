//! Ray-traced synthetic dynamic scenes with exact ground truth.
//!
//! The world is z-up: a checkered ground square, static boxes and moving
//! bodies, all Lambertian under one directional light, seen by a camera on
//! a slow arc. Rays that miss everything return the background colour.

use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{boxes_to_mask, write_manifest, write_mask_png, write_raw_f32, Box3, FrameEntry, Manifest, ManifestBounds, MANIFEST_FILE, MANIFEST_VERSION};
use crate::math::Vec3;
use crate::render::{rgb_to_png_bytes, CameraModel};
use crate::scene::pointcloud::write_ply;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundSpec {
    /// The ground covers `[-half_size, half_size]^2` at `z = 0`.
    pub half_size: f64,
    pub checker: f64,
    pub colors: [[f64; 3]; 2],
}

impl Default for GroundSpec {
    fn default() -> Self {
        Self {
            half_size: 6.0,
            checker: 1.0,
            colors: [[0.78, 0.74, 0.66], [0.36, 0.42, 0.48]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StaticBox {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

/// Path over normalized sequence time `s` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Trajectory {
    Linear {
        start: [f64; 3],
        end: [f64; 3],
    },
    Circular {
        center: [f64; 3],
        radius: f64,
        /// Radians.
        start_angle: f64,
        end_angle: f64,
    },
}

impl Trajectory {
    pub fn at(&self, s: f64) -> [f64; 3] {
        match self {
            Trajectory::Linear { start, end } => std::array::from_fn(|a| start[a] + (end[a] - start[a]) * s),
            Trajectory::Circular {
                center,
                radius,
                start_angle,
                end_angle,
            } => {
                let a = start_angle + (end_angle - start_angle) * s;
                [center[0] + radius * a.cos(), center[1] + radius * a.sin(), center[2]]
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicBody {
    pub shape: Shape,
    pub color: [f64; 3],
    pub trajectory: Trajectory,
}

impl DynamicBody {
    pub fn bounding_box(&self, s: f64) -> Box3 {
        let c = self.trajectory.at(s);
        match self.shape {
            Shape::Sphere { radius } => Box3::around_sphere(c, radius),
            Shape::Box { half_extents } => Box3 {
                center: c,
                half_extents,
                yaw: 0.0,
            },
        }
    }

    fn half_size(&self) -> [f64; 3] {
        match self.shape {
            Shape::Sphere { radius } => [radius; 3],
            Shape::Box { half_extents } => half_extents,
        }
    }
}

/// Camera circling `target` at `radius` and `height`, sweeping from
/// `start_angle` to `end_angle` (degrees) over the sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CameraPath {
    pub target: [f64; 3],
    pub radius: f64,
    pub height: f64,
    pub start_angle: f64,
    pub end_angle: f64,
    pub focal: f64,
    pub near: f64,
    pub far: f64,
}

impl Default for CameraPath {
    fn default() -> Self {
        Self {
            target: [0.0, 0.5, 0.3],
            radius: 6.5,
            height: 3.2,
            start_angle: -105.0,
            end_angle: -75.0,
            focal: 100.0,
            near: 0.1,
            far: 60.0,
        }
    }
}

impl CameraPath {
    pub fn eye(&self, s: f64) -> [f64; 3] {
        let a = (self.start_angle + (self.end_angle - self.start_angle) * s).to_radians();
        [
            self.target[0] + self.radius * a.cos(),
            self.target[1] + self.radius * a.sin(),
            self.height,
        ]
    }

    pub fn camera(&self, s: f64, width: usize, height: usize) -> CameraModel {
        CameraModel::look_at(
            Vec3::from(self.eye(s)),
            Vec3::from(self.target),
            Vec3::new(0.0, 0.0, 1.0),
            self.focal,
            self.focal,
            width,
            height,
            self.near,
            self.far,
        )
    }
}

/// Simulated spinning range sensor that sweeps every `every` frames from
/// above the camera position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LidarSpec {
    pub every: usize,
    pub azimuth_steps: usize,
    pub elevation_steps: usize,
    /// Degrees.
    pub elevation_min: f64,
    pub elevation_max: f64,
    pub mount_height: f64,
    pub max_range: f64,
}

impl Default for LidarSpec {
    fn default() -> Self {
        Self {
            every: 10,
            azimuth_steps: 720,
            elevation_steps: 40,
            elevation_min: -40.0,
            elevation_max: 5.0,
            mount_height: 2.5,
            max_range: 25.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSceneSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    /// Seconds between frames.
    pub frame_interval: f64,
    pub ground: GroundSpec,
    pub static_boxes: Vec<StaticBox>,
    pub dynamic: Vec<DynamicBody>,
    pub camera: CameraPath,
    /// Direction towards the light.
    pub light_dir: [f64; 3],
    pub ambient: f64,
    pub background: [f64; 3],
    /// Depth samples per frame.
    pub depth_samples: usize,
    pub lidar: LidarSpec,
    /// Standard deviation of additive RGB noise.
    pub noise: f64,
}

impl Default for SyntheticSceneSpec {
    fn default() -> Self {
        Self {
            width: 128,
            height: 96,
            frames: 50,
            frame_interval: 0.1,
            ground: GroundSpec::default(),
            static_boxes: vec![
                StaticBox {
                    center: [-2.2, 2.0, 0.6],
                    half_extents: [0.6, 0.6, 0.6],
                    yaw: 0.4,
                    color: [0.25, 0.55, 0.3],
                },
                StaticBox {
                    center: [2.4, 2.6, 0.9],
                    half_extents: [0.5, 0.8, 0.9],
                    yaw: -0.3,
                    color: [0.85, 0.8, 0.3],
                },
                StaticBox {
                    center: [0.3, 3.6, 0.4],
                    half_extents: [1.2, 0.3, 0.4],
                    yaw: 0.1,
                    color: [0.55, 0.35, 0.7],
                },
            ],
            dynamic: vec![DynamicBody {
                shape: Shape::Sphere { radius: 0.5 },
                color: [0.9, 0.25, 0.15],
                trajectory: Trajectory::Linear {
                    start: [-1.0, 0.2, 0.8],
                    end: [1.0, 0.2, 0.8],
                },
            }],
            camera: CameraPath::default(),
            light_dir: [0.4, -0.5, 0.8],
            ambient: 0.35,
            background: [0.0; 3],
            depth_samples: 300,
            lidar: LidarSpec::default(),
            noise: 0.0,
        }
    }
}

/// Height of the box that trajectories must stay inside.
const CEILING: f64 = 10.0;

impl SyntheticSceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.frames < 2 {
            return bad("frames must be at least 2".into());
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be nonzero".into());
        }
        if !(self.frame_interval > 0.0 && self.frame_interval.is_finite()) {
            return bad("frame_interval must be positive".into());
        }
        if !(self.ground.half_size > 0.0 && self.ground.checker > 0.0) {
            return bad("ground half_size and checker must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ambient) || !(0.0..=1.0).contains(&self.noise.min(1.0)) || self.noise < 0.0 {
            return bad("ambient must lie in [0, 1] and noise must be non-negative".into());
        }
        if Vec3::from(self.light_dir).norm() == 0.0 {
            return bad("light_dir must be nonzero".into());
        }
        if self.lidar.every == 0 || self.lidar.azimuth_steps == 0 || self.lidar.elevation_steps == 0 {
            return bad("lidar steps must be positive".into());
        }
        let h = self.ground.half_size;
        for (i, body) in self.dynamic.iter().enumerate() {
            let size = body.half_size();
            if size.iter().any(|v| !(*v > 0.0)) {
                return bad(format!("dynamic body {i} has a non-positive size"));
            }
            for k in 0..=16 {
                let c = body.trajectory.at(k as f64 / 16.0);
                let inside = (0..2).all(|a| c[a] - size[a] >= -h && c[a] + size[a] <= h)
                    && c[2] - size[2] >= 0.0
                    && c[2] + size[2] <= CEILING;
                if !inside {
                    return bad(format!("dynamic body {i} leaves the scene box"));
                }
            }
        }
        for (i, b) in self.static_boxes.iter().enumerate() {
            if b.half_extents.iter().any(|v| !(*v > 0.0)) {
                return bad(format!("static box {i} has a non-positive size"));
            }
        }
        Ok(())
    }

    pub fn normalized_time(&self, frame: usize) -> f64 {
        frame as f64 / (self.frames - 1) as f64
    }

    pub fn camera_at(&self, frame: usize) -> CameraModel {
        self.camera.camera(self.normalized_time(frame), self.width, self.height)
    }

    /// Dynamic bodies' bounding boxes at a frame.
    pub fn dynamic_boxes(&self, frame: usize) -> Vec<Box3> {
        let s = self.normalized_time(frame);
        self.dynamic.iter().map(|d| d.bounding_box(s)).collect()
    }

    pub fn bounds(&self) -> ManifestBounds {
        let h = self.ground.half_size;
        ManifestBounds {
            aabb_min: [-h, -h, 0.0],
            aabb_max: [h, h, CEILING],
        }
    }
}

/// What a ray hit.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub normal: Vec3,
    pub albedo: [f64; 3],
    /// 0 ground, `1..` static boxes, then dynamic bodies.
    pub object: usize,
}

/// The scene geometry frozen at one normalized time.
pub struct SceneAt<'a> {
    spec: &'a SyntheticSceneSpec,
    statics: Vec<Box3>,
    dynamic: Vec<([f64; 3], &'a DynamicBody)>,
}

fn box_normal(b: &Box3, p: &Vec3) -> Vec3 {
    let axes = b.axes();
    let rel = p - Vec3::from(b.center);
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for a in 0..3 {
        let v = (rel.dot(&axes[a]) / b.half_extents[a]).abs();
        if v > best_v {
            best_v = v;
            best = a;
        }
    }
    axes[best] * rel.dot(&axes[best]).signum()
}

impl<'a> SceneAt<'a> {
    pub fn new(spec: &'a SyntheticSceneSpec, s: f64) -> Self {
        Self {
            spec,
            statics: spec
                .static_boxes
                .iter()
                .map(|b| Box3 {
                    center: b.center,
                    half_extents: b.half_extents,
                    yaw: b.yaw,
                })
                .collect(),
            dynamic: spec.dynamic.iter().map(|d| (d.trajectory.at(s), d)).collect(),
        }
    }

    pub fn object_count(&self) -> usize {
        1 + self.statics.len() + self.dynamic.len()
    }

    pub fn is_dynamic(&self, object: usize) -> bool {
        object > self.statics.len()
    }

    pub fn trace(&self, o: &Vec3, d: &Vec3) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |h: Hit| {
            if h.distance > 1e-9 && best.is_none_or(|b| h.distance < b.distance) {
                best = Some(h);
            }
        };
        let g = &self.spec.ground;
        if d.z.abs() > 1e-12 {
            let t = -o.z / d.z;
            let p = o + d * t;
            if t > 0.0 && p.x.abs() <= g.half_size && p.y.abs() <= g.half_size {
                let parity = ((p.x / g.checker).floor() + (p.y / g.checker).floor()).rem_euclid(2.0) as usize;
                consider(Hit {
                    distance: t,
                    normal: Vec3::new(0.0, 0.0, if d.z < 0.0 { 1.0 } else { -1.0 }),
                    albedo: g.colors[parity],
                    object: 0,
                });
            }
        }
        for (k, b) in self.statics.iter().enumerate() {
            if let Some(t) = b.intersect(o, d) {
                let p = o + d * t;
                consider(Hit {
                    distance: t,
                    normal: box_normal(b, &p),
                    albedo: self.spec.static_boxes[k].color,
                    object: 1 + k,
                });
            }
        }
        let base = 1 + self.statics.len();
        for (k, (c, body)) in self.dynamic.iter().enumerate() {
            let c = Vec3::from(*c);
            match body.shape {
                Shape::Sphere { radius } => {
                    let oc = o - c;
                    let b = oc.dot(d);
                    let disc = b * b - (oc.norm_squared() - radius * radius);
                    if disc >= 0.0 {
                        let sq = disc.sqrt();
                        let t = if -b - sq > 0.0 { -b - sq } else { -b + sq };
                        if t > 0.0 {
                            let p = o + d * t;
                            consider(Hit {
                                distance: t,
                                normal: (p - c) / radius,
                                albedo: body.color,
                                object: base + k,
                            });
                        }
                    }
                }
                Shape::Box { half_extents } => {
                    let bx = Box3 {
                        center: c.into(),
                        half_extents,
                        yaw: 0.0,
                    };
                    if let Some(t) = bx.intersect(o, d) {
                        let p = o + d * t;
                        consider(Hit {
                            distance: t,
                            normal: box_normal(&bx, &p),
                            albedo: body.color,
                            object: base + k,
                        });
                    }
                }
            }
        }
        best
    }

    pub fn shade(&self, hit: &Hit) -> [f64; 3] {
        let l = Vec3::from(self.spec.light_dir).normalize();
        let lambert = hit.normal.dot(&l).max(0.0);
        let k = self.spec.ambient + (1.0 - self.spec.ambient) * lambert;
        hit.albedo.map(|a| (a * k).clamp(0.0, 1.0))
    }
}

/// Distinct constant feature vector per object.
pub fn object_feature(object: usize, n_static: usize) -> [f64; 3] {
    if object == 0 {
        [0.8, 0.1, 0.1]
    } else if object <= n_static {
        [0.1, 0.8, 0.1 + 0.6 * object as f64 / (n_static + 1) as f64]
    } else {
        let j = (object - n_static - 1) as f64;
        [0.1, 0.1 + 0.2 * j, 0.9]
    }
}

/// Exact per-pixel renders of one frame.
pub struct FrameRender {
    pub rgb: Vec<f64>,
    /// Camera-space z of the hit, 0 on a miss.
    pub depth: Vec<f64>,
    pub object: Vec<Option<usize>>,
    pub features: Vec<f64>,
}

pub fn render_frame(spec: &SyntheticSceneSpec, frame: usize) -> FrameRender {
    let cam = spec.camera_at(frame);
    let scene = SceneAt::new(spec, spec.normalized_time(frame));
    let forward = cam.rotation().row(2).transpose();
    let n = spec.width * spec.height;
    let mut out = FrameRender {
        rgb: vec![0.0; n * 3],
        depth: vec![0.0; n],
        object: vec![None; n],
        features: vec![0.0; n * 3],
    };
    for y in 0..spec.height {
        for x in 0..spec.width {
            let i = y * spec.width + x;
            let (o, d) = cam.ray(x as f64 + 0.5, y as f64 + 0.5);
            match scene.trace(&o, &d) {
                Some(hit) => {
                    out.rgb[3 * i..3 * i + 3].copy_from_slice(&scene.shade(&hit));
                    out.depth[i] = hit.distance * d.dot(&forward);
                    out.object[i] = Some(hit.object);
                    out.features[3 * i..3 * i + 3].copy_from_slice(&object_feature(hit.object, spec.static_boxes.len()));
                }
                None => out.rgb[3 * i..3 * i + 3].copy_from_slice(&spec.background),
            }
        }
    }
    out
}

/// Range-sensor returns accumulated over every `lidar.every`-th frame;
/// moving bodies therefore leave a trail of samples along their path.
pub fn lidar_points(spec: &SyntheticSceneSpec) -> Vec<[f64; 3]> {
    let l = &spec.lidar;
    let mut pts = Vec::new();
    for f in (0..spec.frames).step_by(l.every) {
        let s = spec.normalized_time(f);
        let scene = SceneAt::new(spec, s);
        let mut origin = Vec3::from(spec.camera.eye(s));
        origin.z = l.mount_height;
        for ei in 0..l.elevation_steps {
            let el = if l.elevation_steps == 1 {
                l.elevation_min
            } else {
                l.elevation_min + (l.elevation_max - l.elevation_min) * ei as f64 / (l.elevation_steps - 1) as f64
            }
            .to_radians();
            for ai in 0..l.azimuth_steps {
                let az = std::f64::consts::TAU * ai as f64 / l.azimuth_steps as f64;
                let d = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
                if let Some(hit) = scene.trace(&origin, &d) {
                    if hit.distance <= l.max_range {
                        let p = origin + d * hit.distance;
                        pts.push([p.x, p.y, p.z]);
                    }
                }
            }
        }
    }
    pts
}

/// Per-frame record in the ground-truth sidecar.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFrame {
    pub frame: usize,
    pub timestamp: f64,
    pub time: f64,
    pub dynamic_centers: Vec<[f64; 3]>,
    pub dynamic_boxes: Vec<Box3>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub spec: SyntheticSceneSpec,
    pub frames: Vec<GroundTruthFrame>,
}

pub const GROUND_TRUTH_FILE: &str = "groundtruth.json";

/// Writes a complete dataset (manifest, images, sidecars, point cloud and
/// ground truth) into `out`.
pub fn synthesize(spec: &SyntheticSceneSpec, seed: u64, out: &Path) -> Result<Manifest> {
    spec.validate()?;
    for sub in ["images", "depth", "features", "masks"] {
        fs::create_dir_all(out.join(sub))?;
    }
    let entries: Vec<FrameEntry> = (0..spec.frames)
        .into_par_iter()
        .map(|f| -> Result<FrameEntry> {
            let r = render_frame(spec, f);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(f as u64 + 1);
            let mut rgb = r.rgb;
            if spec.noise > 0.0 {
                let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::invalid(e.to_string()))?;
                for v in &mut rgb {
                    *v = (*v + normal.sample(&mut rng)).clamp(0.0, 1.0);
                }
            }
            let name = format!("{f:04}");
            let image = format!("images/{name}.png");
            fs::write(out.join(&image), rgb_to_png_bytes(&rgb, spec.width, spec.height)?)?;

            let hits: Vec<usize> = (0..r.depth.len()).filter(|&i| r.object[i].is_some()).collect();
            let k = spec.depth_samples.min(hits.len());
            let mut picked: Vec<usize> = sample(&mut rng, hits.len(), k).into_iter().map(|j| hits[j]).collect();
            picked.sort_unstable();
            let mut depth = Vec::with_capacity(k * 3);
            for i in picked {
                depth.extend([(i % spec.width) as f32, (i / spec.width) as f32, r.depth[i] as f32]);
            }
            let depth_rel = format!("depth/{name}.bin");
            if k > 0 {
                write_raw_f32(&out.join(&depth_rel), k, 3, &depth)?;
            }

            let features_rel = format!("features/{name}.bin");
            let feats: Vec<f32> = r.features.iter().map(|v| *v as f32).collect();
            write_raw_f32(&out.join(&features_rel), spec.height, spec.width, &feats)?;

            let cam = spec.camera_at(f);
            let boxes = spec.dynamic_boxes(f);
            let mask = boxes_to_mask(&boxes, &cam)?;
            let mask_rel = format!("masks/{name}.png");
            write_mask_png(&out.join(&mask_rel), &mask, spec.width, spec.height)?;

            Ok(FrameEntry {
                image,
                camera: cam,
                timestamp: f as f64 * spec.frame_interval,
                depth: (k > 0).then_some(depth_rel),
                features: Some(features_rel),
                mask: Some(mask_rel),
                boxes: Some(boxes),
            })
        })
        .collect::<Result<_>>()?;

    let points = lidar_points(spec);
    if points.is_empty() {
        return Err(Error::invalid("the range sensor recorded no returns"));
    }
    write_ply(std::io::BufWriter::new(fs::File::create(out.join("points.ply"))?), &points)?;

    let truth = GroundTruth {
        seed,
        spec: spec.clone(),
        frames: (0..spec.frames)
            .map(|f| {
                let s = spec.normalized_time(f);
                GroundTruthFrame {
                    frame: f,
                    timestamp: f as f64 * spec.frame_interval,
                    time: s,
                    dynamic_centers: spec.dynamic.iter().map(|d| d.trajectory.at(s)).collect(),
                    dynamic_boxes: spec.dynamic_boxes(f),
                }
            })
            .collect(),
    };
    fs::write(out.join(GROUND_TRUTH_FILE), serde_json::to_string_pretty(&truth)?)?;

    let manifest = Manifest {
        version: MANIFEST_VERSION,
        pointcloud: Some("points.ply".into()),
        bounds: Some(spec.bounds()),
        frames: entries,
    };
    write_manifest(&manifest, &out.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Reads the ground-truth sidecar written by [`synthesize`].
pub fn read_ground_truth(dir: &Path) -> Result<GroundTruth> {
    let p = dir.join(GROUND_TRUTH_FILE);
    let text = fs::read_to_string(&p).map_err(|e| Error::load(&p, None, e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| Error::load(&p, None, e.to_string()))
}

/// Small fast scene for tests: few frames, small images, sparse sensor.
pub fn tiny_spec() -> SyntheticSceneSpec {
    SyntheticSceneSpec {
        width: 48,
        height: 36,
        frames: 6,
        camera: CameraPath {
            focal: 40.0,
            ..CameraPath::default()
        },
        depth_samples: 40,
        lidar: LidarSpec {
            every: 3,
            azimuth_steps: 180,
            elevation_steps: 12,
            ..LidarSpec::default()
        },
        ..SyntheticSceneSpec::default()
    }
}
