//! Pinhole camera: world-to-camera rigid transform plus intrinsics.
//! Camera frame is x-right, y-down, z-forward.

use crate::geometry::Ray;
use crate::math::{Mat3, Vec3};

#[derive(Clone, Debug)]
pub struct Camera {
    /// World → camera rotation; x_cam = R · x_world + t.
    pub rotation: Mat3,
    pub translation: Vec3,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Camera {
    /// Camera center in world coordinates.
    pub fn position(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// World-space ray through the center of pixel (x, y).
    pub fn pixel_ray(&self, x: u32, y: u32) -> Ray {
        let dir_cam = Vec3::new(
            (x as f64 + 0.5 - self.cx) / self.fx,
            (y as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        );
        Ray {
            origin: self.position(),
            dir: (self.rotation.transpose() * dir_cam).normalize(),
        }
    }

    /// World point → camera frame.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Camera at `pos` looking toward `target`, roll fixed by world `up`.
    pub fn look_at(
        pos: Vec3,
        target: Vec3,
        up: Vec3,
        fx: f64,
        fy: f64,
        width: u32,
        height: u32,
    ) -> Camera {
        let forward = (target - pos).normalize();
        let right = forward.cross(&up).normalize();
        let down = forward.cross(&right); // = -true-up; camera y points down
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        Camera {
            rotation,
            translation: -(rotation * pos),
            fx,
            fy,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }
}
