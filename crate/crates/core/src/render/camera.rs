use nalgebra::{Matrix4, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat3, Vec3};

/// Pinhole camera in the OpenCV convention (x right, y down, z forward).
///
/// Pixel `(i, j)` covers `[i, i+1) x [j, j+1)`; its centre sits at
/// `(i + 0.5, j + 0.5)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// Row-major rigid transform from world to camera coordinates.
    pub world_to_camera: [[f64; 4]; 4],
    pub near: f64,
    pub far: f64,
}

impl CameraModel {
    /// Camera at `eye` looking at `target`, with `up` giving the world's
    /// up direction (image y points along `-up`).
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, fx: f64, fy: f64, width: usize, height: usize, near: f64, far: f64) -> Self {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right);
        let r = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let t = -(r * eye);
        let mut w = [[0.0; 4]; 4];
        for i in 0..3 {
            for j in 0..3 {
                w[i][j] = r[(i, j)];
            }
            w[i][3] = t[i];
        }
        w[3][3] = 1.0;
        Self {
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            world_to_camera: w,
            near,
            far,
        }
    }

    pub fn rotation(&self) -> Mat3 {
        let w = &self.world_to_camera;
        Mat3::new(
            w[0][0], w[0][1], w[0][2], w[1][0], w[1][1], w[1][2], w[2][0], w[2][1], w[2][2],
        )
    }

    pub fn translation(&self) -> Vec3 {
        let w = &self.world_to_camera;
        Vec3::new(w[0][3], w[1][3], w[2][3])
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let w = &self.world_to_camera;
        Matrix4::from_fn(|i, j| w[i][j])
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation().transpose() * self.translation())
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation() * p + self.translation()
    }

    /// Pixel coordinates of a camera-space point (no culling).
    pub fn project_camera(&self, pc: &Vec3) -> Vector2<f64> {
        Vector2::new(
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        )
    }

    /// World-space ray (origin, unit direction) through a pixel-plane point.
    pub fn ray(&self, u: f64, v: f64) -> (Vec3, Vec3) {
        let dc = Vec3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0);
        let dir = (self.rotation().transpose() * dc).normalize();
        (self.center(), dir)
    }

    /// Tangent of the half field of view along x and y.
    pub fn tan_half_fov(&self) -> (f64, f64) {
        (
            0.5 * self.width as f64 / self.fx,
            0.5 * self.height as f64 / self.fy,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.near, self.far]
            .iter()
            .chain(self.world_to_camera.iter().flatten())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("camera has non-finite entries"));
        }
        if self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::invalid("camera focal lengths must be positive"));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera image size must be nonzero"));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::invalid("camera needs 0 < near < far"));
        }
        let r = self.rotation();
        if (r.transpose() * r - Mat3::identity()).abs().max() > 1e-8 {
            return Err(Error::invalid("camera rotation block is not orthonormal"));
        }
        if self.world_to_camera[3] != [0.0, 0.0, 0.0, 1.0] {
            return Err(Error::invalid("camera transform bottom row must be (0, 0, 0, 1)"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_projects_target_to_principal_point() {
        let cam = CameraModel::look_at(
            Vec3::new(3.0, -4.0, 2.0),
            Vec3::new(0.5, 0.5, 0.0),
            Vec3::z(),
            100.0,
            100.0,
            64,
            48,
            0.1,
            100.0,
        );
        cam.validate().unwrap();
        let pc = cam.to_camera(&Vec3::new(0.5, 0.5, 0.0));
        let uv = cam.project_camera(&pc);
        assert!((uv.x - 32.0).abs() < 1e-9 && (uv.y - 24.0).abs() < 1e-9);
        assert!((cam.center() - Vec3::new(3.0, -4.0, 2.0)).norm() < 1e-12);
        // Points above the target appear higher in the image (smaller v).
        let above = cam.project_camera(&cam.to_camera(&Vec3::new(0.5, 0.5, 1.0)));
        assert!(above.y < 24.0);
    }

    #[test]
    fn ray_hits_projected_point() {
        let cam = CameraModel::look_at(Vec3::new(0.0, -5.0, 1.0), Vec3::zeros(), Vec3::z(), 80.0, 90.0, 40, 30, 0.1, 50.0);
        let p = Vec3::new(0.3, 0.2, -0.4);
        let uv = cam.project_camera(&cam.to_camera(&p));
        let (o, d) = cam.ray(uv.x, uv.y);
        let along = (p - o).dot(&d);
        assert!(((o + d * along) - p).norm() < 1e-10);
    }

    #[test]
    fn rejects_degenerate_cameras() {
        let mut cam = CameraModel::look_at(Vec3::new(0.0, -5.0, 1.0), Vec3::zeros(), Vec3::z(), 80.0, 90.0, 40, 30, 0.1, 50.0);
        cam.near = 60.0;
        assert!(cam.validate().is_err());
        cam.near = 0.1;
        cam.world_to_camera[0][0] = 2.0;
        assert!(cam.validate().is_err());
    }
}
