//! Oriented 3D boxes and their image-plane footprints.

use serde::{Deserialize, Serialize};

use crate::math::Vec3;
use crate::render::CameraModel;
use crate::{Error, Result};

/// Box rotated by `yaw` radians about the world z axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Box3 {
    pub center: [f64; 3],
    pub half_extents: [f64; 3],
    #[serde(default)]
    pub yaw: f64,
}

impl Box3 {
    pub fn validate(&self) -> Result<()> {
        let finite = self.center.iter().chain(&self.half_extents).all(|v| v.is_finite()) && self.yaw.is_finite();
        if !finite || self.half_extents.iter().any(|h| *h < 0.0) {
            return Err(Error::invalid(format!("malformed box {self:?}")));
        }
        Ok(())
    }

    /// Local axes (unit vectors) in world coordinates.
    pub fn axes(&self) -> [Vec3; 3] {
        let (s, c) = self.yaw.sin_cos();
        [Vec3::new(c, s, 0.0), Vec3::new(-s, c, 0.0), Vec3::new(0.0, 0.0, 1.0)]
    }

    /// Corner `k` has sign `+` on axis `a` when bit `a` of `k` is set.
    pub fn corners(&self) -> [Vec3; 8] {
        let axes = self.axes();
        let c = Vec3::from(self.center);
        std::array::from_fn(|k| {
            let mut p = c;
            for a in 0..3 {
                let s = if k >> a & 1 == 1 { 1.0 } else { -1.0 };
                p += axes[a] * (s * self.half_extents[a]);
            }
            p
        })
    }

    /// Ray entry distance, if the ray hits the box at `t >= 0`.
    pub fn intersect(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let axes = self.axes();
        let rel = origin - Vec3::from(self.center);
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            let o = rel.dot(&axes[a]);
            let d = dir.dot(&axes[a]);
            let h = self.half_extents[a];
            if d.abs() < 1e-300 {
                if o.abs() > h {
                    return None;
                }
                continue;
            }
            let (mut lo, mut hi) = ((-h - o) / d, (h - o) / d);
            if lo > hi {
                std::mem::swap(&mut lo, &mut hi);
            }
            t0 = t0.max(lo);
            t1 = t1.min(hi);
        }
        if t1 < t0.max(0.0) {
            None
        } else {
            Some(t0.max(0.0))
        }
    }

    /// Axis-aligned box enclosing a sphere.
    pub fn around_sphere(center: [f64; 3], radius: f64) -> Self {
        Self {
            center,
            half_extents: [radius; 3],
            yaw: 0.0,
        }
    }
}

const EDGES: [(usize, usize); 12] = [
    (0, 1),
    (2, 3),
    (4, 5),
    (6, 7),
    (0, 2),
    (1, 3),
    (4, 6),
    (5, 7),
    (0, 4),
    (1, 5),
    (2, 6),
    (3, 7),
];

/// Image-plane points spanning the part of the box in front of the near
/// plane: visible corners plus edge crossings of the near plane.
fn footprint_points(b: &Box3, camera: &CameraModel) -> Vec<[f64; 2]> {
    let cam: Vec<Vec3> = b.corners().iter().map(|p| camera.to_camera(p)).collect();
    let near = camera.near;
    let mut pts: Vec<Vec3> = cam.iter().filter(|p| p.z >= near).copied().collect();
    for (i, j) in EDGES {
        let (a, c) = (cam[i], cam[j]);
        if (a.z - near) * (c.z - near) < 0.0 {
            let s = (near - a.z) / (c.z - a.z);
            pts.push(a + (c - a) * s);
        }
    }
    pts.iter()
        .map(|p| {
            let q = camera.project_camera(p);
            [q.x, q.y]
        })
        .collect()
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Counter-clockwise convex hull (monotone chain).
pub fn convex_hull(mut pts: Vec<[f64; 2]>) -> Vec<[f64; 2]> {
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(pts.len() * 2);
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &[f64; 2]>> = if pass == 0 {
            Box::new(pts.iter())
        } else {
            Box::new(pts.iter().rev())
        };
        for &p in iter {
            while hull.len() >= start + 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
    }
    hull
}

fn inside_convex(hull: &[[f64; 2]], p: [f64; 2]) -> bool {
    let n = hull.len();
    n >= 3 && (0..n).all(|i| cross(hull[i], hull[(i + 1) % n], p) >= 0.0)
}

/// Union of the projected footprints of `boxes`, tested at pixel centres.
/// Row-major `height x width`.
pub fn boxes_to_mask(boxes: &[Box3], camera: &CameraModel) -> Result<Vec<bool>> {
    camera.validate()?;
    let (w, h) = (camera.width, camera.height);
    let mut mask = vec![false; w * h];
    for b in boxes {
        b.validate()?;
        let hull = convex_hull(footprint_points(b, camera));
        if hull.len() < 3 {
            continue;
        }
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &hull {
            x0 = x0.min(p[0]);
            x1 = x1.max(p[0]);
            y0 = y0.min(p[1]);
            y1 = y1.max(p[1]);
        }
        let clamp = |v: f64, n: usize| v.clamp(0.0, n as f64) as usize;
        let (xa, xb) = (clamp((x0 - 0.5).floor(), w), clamp((x1 + 0.5).ceil(), w));
        let (ya, yb) = (clamp((y0 - 0.5).floor(), h), clamp((y1 + 0.5).ceil(), h));
        for y in ya..yb {
            for x in xa..xb {
                if inside_convex(&hull, [x as f64 + 0.5, y as f64 + 0.5]) {
                    mask[y * w + x] = true;
                }
            }
        }
    }
    Ok(mask)
}
