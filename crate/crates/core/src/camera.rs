//! Pinhole camera model and depth maps.
//!
//! Camera frame follows the usual depth-camera convention: x right, y down,
//! z forward; `pose` maps world points into the camera frame.

use nalgebra::{Isometry3, Matrix3, Rotation3, Translation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World -> camera transform.
    pub pose: Isometry3<f64>,
}

impl CameraModel {
    pub fn is_well_formed(&self) -> bool {
        self.fx > 0.0 && self.fy > 0.0 && self.width >= 16 && self.height >= 16
    }

    /// Camera with the given eye position looking at `target`; `up` breaks
    /// the roll ambiguity (y axis points "down" in the image).
    pub fn look_at(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
    ) -> Self {
        let z = (target - eye).normalize();
        let x = z.cross(&up).normalize();
        let y = z.cross(&x);
        let rot = Rotation3::from_matrix_unchecked(Matrix3::from_rows(&[
            x.transpose(),
            y.transpose(),
            z.transpose(),
        ]));
        let q = UnitQuaternion::from_rotation_matrix(&rot);
        let t = -(q * eye);
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            pose: Isometry3::from_parts(Translation3::from(t), q),
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.inverse().translation.vector
    }

    /// Project a world point; returns (pixel u, pixel v, camera depth z) for
    /// points in front of the camera.
    pub fn project(&self, world: &Vector3<f64>) -> Option<(f64, f64, f64)> {
        let c = self.pose * nalgebra::Point3::from(*world);
        if c.z <= 0.0 {
            return None;
        }
        Some((
            self.fx * c.x / c.z + self.cx,
            self.fy * c.y / c.z + self.cy,
            c.z,
        ))
    }

    /// World position of pixel (u, v) at camera depth z (pixel centers at
    /// integer coordinates plus 0.5).
    pub fn backproject(&self, u: f64, v: f64, z: f64) -> Vector3<f64> {
        let cam = Vector3::new((u - self.cx) / self.fx * z, (v - self.cy) / self.fy * z, z);
        (self.pose.inverse() * nalgebra::Point3::from(cam)).coords
    }

    /// Unit world-frame direction of the ray through pixel center (u, v),
    /// together with the camera-z component per unit ray length.
    pub fn pixel_ray(&self, u: usize, v: usize) -> (Vector3<f64>, f64) {
        let dir_cam = Vector3::new(
            (u as f64 + 0.5 - self.cx) / self.fx,
            (v as f64 + 0.5 - self.cy) / self.fy,
            1.0,
        );
        let z_per_len = 1.0 / dir_cam.norm();
        let dir_world = self.pose.inverse().rotation * dir_cam.normalize();
        (dir_world, z_per_len)
    }

    /// Rotate a camera-frame direction into the world frame.
    pub fn dir_to_world(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.pose.inverse().rotation * d
    }

    /// Rotate a world-frame direction into the camera frame.
    pub fn dir_to_camera(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.pose.rotation * d
    }
}

/// Per-pixel depth in meters (0 = invalid) plus camera-frame normals.
#[derive(Debug, Clone)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<f64>,
    pub normal: Vec<Vector3<f64>>,
}

impl DepthMap {
    pub fn invalid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            depth: vec![0.0; width * height],
            normal: vec![Vector3::zeros(); width * height],
        }
    }

    #[inline]
    pub fn idx(&self, u: usize, v: usize) -> usize {
        v * self.width + u
    }

    #[inline]
    pub fn is_valid(&self, u: usize, v: usize) -> bool {
        self.depth[self.idx(u, v)] > 0.0
    }

    pub fn valid_count(&self) -> usize {
        self.depth.iter().filter(|&&d| d > 0.0).count()
    }
}
