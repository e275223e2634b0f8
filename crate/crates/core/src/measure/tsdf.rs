//! Truncated signed distance volume for per-frame multi-view depth fusion,
//! with projective integration and zero-crossing ray extraction.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::camera::{CameraModel, DepthMap};

#[derive(Debug, Clone)]
pub struct TsdfVolume {
    pub origin: Vector3<f64>,
    pub dims: [usize; 3],
    pub voxel: f64,
    /// Truncation distance in meters.
    pub tau: f64,
    /// Truncated signed distance per voxel, meters, |tsdf| <= tau.
    pub tsdf: Vec<f32>,
    pub weight: Vec<f32>,
}

impl TsdfVolume {
    pub fn new(lo: Vector3<f64>, hi: Vector3<f64>, voxel: f64, tau: f64) -> Self {
        assert!(voxel > 0.0 && tau > 0.0);
        let dims = [
            (((hi.x - lo.x) / voxel).ceil() as usize).max(1),
            (((hi.y - lo.y) / voxel).ceil() as usize).max(1),
            (((hi.z - lo.z) / voxel).ceil() as usize).max(1),
        ];
        let n = dims[0] * dims[1] * dims[2];
        Self {
            origin: lo,
            dims,
            voxel,
            tau,
            tsdf: vec![0.0; n],
            weight: vec![0.0; n],
        }
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (z * self.dims[1] + y) * self.dims[0] + x
    }

    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                (x as f64 + 0.5) * self.voxel,
                (y as f64 + 0.5) * self.voxel,
                (z as f64 + 0.5) * self.voxel,
            )
    }

    /// Fold one filtered depth map into the volume: for every voxel that
    /// projects onto a valid pixel, average the clamped projective signed
    /// distance in with weight 1, capping the weight at `w_max`.
    pub fn integrate(&mut self, depth: &DepthMap, cam: &CameraModel, w_max: f64) {
        let layer = self.dims[0] * self.dims[1];
        let dims = self.dims;
        let origin = self.origin;
        let voxel = self.voxel;
        let tau = self.tau;
        let rot = cam.pose.rotation.to_rotation_matrix();
        let rot_m = rot.matrix();
        let trans = cam.pose.translation.vector;

        self.tsdf
            .par_chunks_mut(layer)
            .zip(self.weight.par_chunks_mut(layer))
            .enumerate()
            .for_each(|(z, (tsdf_layer, w_layer))| {
                for y in 0..dims[1] {
                    // Camera position of the first voxel in the row, then
                    // step along x (the camera transform is affine).
                    let base = origin
                        + Vector3::new(0.5 * voxel, (y as f64 + 0.5) * voxel, (z as f64 + 0.5) * voxel);
                    let mut c = rot_m * base + trans;
                    let step = rot_m.column(0) * voxel;
                    for x in 0..dims[0] {
                        let cz = c.z;
                        if cz > 0.0 {
                            let u = (cam.fx * c.x / cz + cam.cx).floor();
                            let v = (cam.fy * c.y / cz + cam.cy).floor();
                            if u >= 0.0 && v >= 0.0 && (u as usize) < depth.width && (v as usize) < depth.height {
                                let d = depth.depth[v as usize * depth.width + u as usize];
                                if d > 0.0 {
                                    let sdf = d - cz;
                                    // Small slack keeps the boundary case
                                    // (exactly tau behind) inside the band.
                                    if sdf >= -tau - 1e-9 {
                                        let val = sdf.clamp(-tau, tau) as f32;
                                        let i = y * dims[0] + x;
                                        let w_old = w_layer[i];
                                        let w_new = w_old + 1.0;
                                        tsdf_layer[i] = (tsdf_layer[i] * w_old + val) / w_new;
                                        w_layer[i] = (w_new as f64).min(w_max) as f32;
                                    }
                                }
                            }
                        }
                        c += step;
                    }
                }
            });
    }

    /// Trilinearly interpolated tsdf at a world point; `None` when any of
    /// the 8 surrounding voxels is unobserved or out of bounds.
    pub fn sample(&self, p: &Vector3<f64>) -> Option<f64> {
        let g = (p - self.origin) / self.voxel - Vector3::repeat(0.5);
        let x0 = g.x.floor();
        let y0 = g.y.floor();
        let z0 = g.z.floor();
        if x0 < 0.0 || y0 < 0.0 || z0 < 0.0 {
            return None;
        }
        let (xi, yi, zi) = (x0 as usize, y0 as usize, z0 as usize);
        if xi + 1 >= self.dims[0] || yi + 1 >= self.dims[1] || zi + 1 >= self.dims[2] {
            return None;
        }
        let fx = g.x - x0;
        let fy = g.y - y0;
        let fz = g.z - z0;
        let mut acc = 0.0;
        for dz in 0..2 {
            for dy in 0..2 {
                for dx in 0..2 {
                    let idx = self.index(xi + dx, yi + dy, zi + dz);
                    if self.weight[idx] <= 0.0 {
                        return None;
                    }
                    let wx = if dx == 1 { fx } else { 1.0 - fx };
                    let wy = if dy == 1 { fy } else { 1.0 - fy };
                    let wz = if dz == 1 { fz } else { 1.0 - fz };
                    acc += wx * wy * wz * self.tsdf[idx] as f64;
                }
            }
        }
        Some(acc)
    }

    /// Central-difference gradient of the sampled field.
    pub fn gradient(&self, p: &Vector3<f64>) -> Option<Vector3<f64>> {
        let h = self.voxel;
        let gx = self.sample(&(p + Vector3::new(h, 0.0, 0.0)))? - self.sample(&(p - Vector3::new(h, 0.0, 0.0)))?;
        let gy = self.sample(&(p + Vector3::new(0.0, h, 0.0)))? - self.sample(&(p - Vector3::new(0.0, h, 0.0)))?;
        let gz = self.sample(&(p + Vector3::new(0.0, 0.0, h)))? - self.sample(&(p - Vector3::new(0.0, 0.0, h)))?;
        Some(Vector3::new(gx, gy, gz))
    }

    /// Ray parameter interval where the ray overlaps the volume bounds.
    pub fn clip_ray(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        let hi = self.origin
            + Vector3::new(
                self.dims[0] as f64 * self.voxel,
                self.dims[1] as f64 * self.voxel,
                self.dims[2] as f64 * self.voxel,
            );
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if dir[a].abs() < 1e-12 {
                if origin[a] < self.origin[a] || origin[a] > hi[a] {
                    return None;
                }
            } else {
                let inv = 1.0 / dir[a];
                let (mut ta, mut tb) = ((self.origin[a] - origin[a]) * inv, (hi[a] - origin[a]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
            }
        }
        (t0 <= t1).then_some((t0.max(0.0), t1))
    }
}

/// Zero crossing (positive to negative) along one ray, found by adaptive
/// marching and located by linear interpolation between the straddling
/// samples. Returns the ray parameter of the crossing.
pub fn march_ray(
    vol: &TsdfVolume,
    origin: &Vector3<f64>,
    dir: &Vector3<f64>,
    t_start: f64,
    t_end: f64,
) -> Option<f64> {
    let (clip0, clip1) = vol.clip_ray(origin, dir)?;
    let mut t = t_start.max(clip0);
    let end = t_end.min(clip1);
    let coarse = vol.tau * 0.5;
    let mut prev: Option<(f64, f64)> = None;
    while t <= end {
        match vol.sample(&(origin + dir * t)) {
            Some(v) => {
                if v <= 0.0 {
                    if let Some((pt, pv)) = prev {
                        if pv > 0.0 {
                            let alpha = pv / (pv - v);
                            return Some(pt + alpha * (t - pt));
                        }
                    }
                    // Entered from unknown space; not a surface crossing.
                    prev = None;
                    t += coarse;
                    continue;
                }
                prev = Some((t, v));
                t += (0.8 * v).max(vol.voxel * 0.5);
            }
            None => {
                prev = None;
                t += coarse;
            }
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn head_on_camera(width: usize, height: usize) -> CameraModel {
        CameraModel::look_at(
            60.0,
            60.0,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
    }

    fn constant_depth(cam: &CameraModel, d: f64) -> DepthMap {
        let mut m = DepthMap::invalid(cam.width, cam.height);
        for i in 0..m.depth.len() {
            m.depth[i] = d;
            m.normal[i] = Vector3::new(0.0, 0.0, -1.0);
        }
        m
    }

    #[test]
    fn voxel_on_surface_gets_zero_tsdf() {
        let voxel = 0.01;
        // Place the grid so one voxel center sits exactly at z = 1.0.
        let lo = Vector3::new(-0.05, -0.05, 1.0 - 5.5 * voxel);
        let mut vol = TsdfVolume::new(lo, lo + Vector3::repeat(0.11), voxel, 0.04);
        let cam = head_on_camera(64, 48);
        vol.integrate(&constant_depth(&cam, 1.0), &cam, 64.0);
        // Voxel (5,5,5) center = lo + 5.5 * voxel in each axis -> z = 1.0.
        let idx = vol.index(5, 5, 5);
        assert!(vol.weight[idx] > 0.0);
        assert!((vol.tsdf[idx] as f64).abs() < 1e-9);
    }

    #[test]
    fn voxel_tau_behind_surface_is_clamped() {
        let voxel = 0.01;
        let tau = 4.0 * voxel;
        let lo = Vector3::new(-0.05, -0.05, 1.0 + tau - 5.5 * voxel);
        let mut vol = TsdfVolume::new(lo, lo + Vector3::repeat(0.11), voxel, tau);
        let cam = head_on_camera(64, 48);
        vol.integrate(&constant_depth(&cam, 1.0), &cam, 64.0);
        // Voxel (5,5,5) center z = 1.0 + tau: exactly tau behind the surface.
        let idx = vol.index(5, 5, 5);
        assert!(vol.weight[idx] > 0.0);
        assert_relative_eq!(vol.tsdf[idx] as f64, -tau, epsilon = 1e-9);
    }

    #[test]
    fn two_cameras_average_their_projective_distances() {
        // Plane z = 1, one head-on camera and one shifted camera. The voxel
        // under test projects near the image centers of both.
        let voxel = 0.01;
        let lo = Vector3::new(-0.08, -0.08, 1.0 - 3.5 * voxel);
        let mut vol = TsdfVolume::new(lo, lo + Vector3::repeat(0.16), voxel, 0.04);
        let cam0 = head_on_camera(64, 48);
        let cam1 = CameraModel::look_at(
            60.0,
            60.0,
            32.0,
            24.0,
            64,
            48,
            Vector3::new(0.3, 0.0, 0.0),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 1.0, 0.0),
        );
        // Exact per-camera depth of the plane z=1 along each pixel ray,
        // expressed as camera-frame z (projective depth).
        let plane_depth = |cam: &CameraModel| {
            let mut m = DepthMap::invalid(cam.width, cam.height);
            for v in 0..cam.height {
                for u in 0..cam.width {
                    let (dir, _) = cam.pixel_ray(u, v);
                    let o = cam.center();
                    if dir.z.abs() < 1e-9 {
                        continue;
                    }
                    let t = (1.0 - o.z) / dir.z;
                    if t > 0.0 {
                        let p = o + dir * t;
                        let c = cam.pose * nalgebra::Point3::from(p);
                        let i = m.idx(u, v);
                        m.depth[i] = c.z;
                        m.normal[i] = cam.dir_to_camera(&Vector3::new(0.0, 0.0, -1.0));
                    }
                }
            }
            m
        };
        let d0 = plane_depth(&cam0);
        let d1 = plane_depth(&cam1);
        vol.integrate(&d0, &cam0, 64.0);
        vol.integrate(&d1, &cam1, 64.0);

        // Hand-computed oracle for voxel (8, 8, 1): project into each
        // camera, read the stored depth, take the two-term average.
        let p = vol.voxel_center(8, 8, 1);
        let mut expected = Vec::new();
        for (cam, d) in [(&cam0, &d0), (&cam1, &d1)] {
            let c = cam.pose * nalgebra::Point3::from(p);
            let u = (cam.fx * c.x / c.z + cam.cx).floor() as usize;
            let v = (cam.fy * c.y / c.z + cam.cy).floor() as usize;
            let meas = d.depth[v * d.width + u];
            assert!(meas > 0.0);
            expected.push((meas - c.z).clamp(-vol.tau, vol.tau));
        }
        let idx = vol.index(8, 8, 1);
        assert_relative_eq!(
            vol.tsdf[idx] as f64,
            (expected[0] + expected[1]) / 2.0,
            epsilon = 1e-6
        );
        assert_relative_eq!(vol.weight[idx] as f64, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn tsdf_values_stay_within_truncation_band() {
        let voxel = 0.01;
        let tau = 0.04;
        let lo = Vector3::new(-0.1, -0.1, 0.8);
        let mut vol = TsdfVolume::new(lo, Vector3::new(0.1, 0.1, 1.2), voxel, tau);
        let cam = head_on_camera(64, 48);
        for d in [0.9, 1.0, 1.05] {
            vol.integrate(&constant_depth(&cam, d), &cam, 4.0);
        }
        for (&t, &w) in vol.tsdf.iter().zip(&vol.weight) {
            assert!(t.abs() as f64 <= tau + 1e-6);
            assert!(w >= 0.0 && w as f64 <= 4.0);
        }
    }

    #[test]
    fn integration_is_order_independent_up_to_rounding() {
        let voxel = 0.01;
        let lo = Vector3::new(-0.1, -0.1, 0.8);
        let cam = head_on_camera(64, 48);
        let maps = [
            constant_depth(&cam, 1.0),
            constant_depth(&cam, 1.01),
            constant_depth(&cam, 0.99),
        ];
        let mut fwd = TsdfVolume::new(lo, Vector3::new(0.1, 0.1, 1.2), voxel, 0.04);
        let mut rev = fwd.clone();
        for m in &maps {
            fwd.integrate(m, &cam, 64.0);
        }
        for m in maps.iter().rev() {
            rev.integrate(m, &cam, 64.0);
        }
        for (a, b) in fwd.tsdf.iter().zip(&rev.tsdf) {
            assert!((a - b).abs() < 1e-5);
        }
    }
}
