//! Per-frame measurement: synthetic depth rendering, view-angle filtering,
//! TSDF fusion across cameras and surfel extraction by raycasting.

pub mod tsdf;

use nalgebra::Vector3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, DepthMap};
use crate::scene::SceneSnapshot;
use tsdf::{march_ray, TsdfVolume};

/// Measurement-stage parameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureParams {
    /// Voxel edge length in meters.
    pub voxel_size: f64,
    /// Truncation distance in voxels.
    pub tau_voxels: f64,
    /// Integration weight cap.
    pub w_max: f64,
    /// Maximum viewing angle in degrees; pixels beyond it are dropped.
    pub view_angle_max_deg: f64,
    /// Padding around the scripted scene bounding box, meters.
    pub volume_margin: f64,
    pub z_near: f64,
    pub z_far: f64,
}

impl Default for MeasureParams {
    fn default() -> Self {
        Self {
            voxel_size: 0.005,
            tau_voxels: 4.0,
            w_max: 64.0,
            view_angle_max_deg: 70.0,
            volume_margin: 0.1,
            z_near: 0.2,
            z_far: 3.0,
        }
    }
}

impl MeasureParams {
    pub fn tau(&self) -> f64 {
        self.tau_voxels * self.voxel_size
    }
}

/// A fused measurement surfel; becomes a model surfel when appended.
#[derive(Debug, Clone, Copy)]
pub struct MeasurementSurfel {
    pub position: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub color: [f32; 3],
    pub radius: f64,
    pub confidence: f64,
}

/// Fused multi-view measurement at one frame: the extracted surfel set plus
/// the filtered per-camera depth maps it came from.
#[derive(Debug, Clone)]
pub struct MeasurementFrame {
    pub surfels: Vec<MeasurementSurfel>,
    pub depths: Vec<DepthMap>,
    pub frame: u32,
}

/// Render the scene through a pinhole camera: per-pixel ray intersection
/// depth with the scene's surface normal at the hit (camera frame). Optional
/// additive Gaussian depth noise is applied by the caller via `add_noise`.
pub fn render_depth(scene: &SceneSnapshot, cam: &CameraModel, z_near: f64, z_far: f64) -> DepthMap {
    let mut map = DepthMap::invalid(cam.width, cam.height);
    if scene.is_empty() {
        return map;
    }
    let origin = cam.center();
    let rows: Vec<Vec<(f64, Vector3<f64>)>> = (0..cam.height)
        .into_par_iter()
        .map(|v| {
            let mut row = Vec::with_capacity(cam.width);
            for u in 0..cam.width {
                let (dir, z_per_len) = cam.pixel_ray(u, v);
                let t_min = z_near / z_per_len;
                let t_max = z_far / z_per_len;
                match scene.raycast(&origin, &dir, t_min, t_max) {
                    Some((t, _)) => {
                        let p = origin + dir * t;
                        let n_world = scene.normal(&p);
                        row.push((t * z_per_len, cam.dir_to_camera(&n_world)));
                    }
                    None => row.push((0.0, Vector3::zeros())),
                }
            }
            row
        })
        .collect();
    for (v, row) in rows.into_iter().enumerate() {
        for (u, (d, n)) in row.into_iter().enumerate() {
            let i = map.idx(u, v);
            map.depth[i] = d;
            map.normal[i] = n;
        }
    }
    map
}

/// Additive Gaussian depth noise, drawn pixel-by-pixel in raster order so
/// the result depends only on the RNG seed.
pub fn add_noise(map: &mut DepthMap, sigma: f64, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    for d in &mut map.depth {
        if *d > 0.0 {
            // Box-Muller keeps us independent of distribution crates.
            let u1: f64 = rng.random::<f64>().max(1e-12);
            let u2: f64 = rng.random();
            let g = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            *d += sigma * g;
        }
    }
}

/// Invalidate pixels whose angle between the local normal and the direction
/// toward the camera exceeds the cutoff (boundary angle kept).
pub fn view_angle_filter(depth: &DepthMap, cam: &CameraModel, max_angle_deg: f64) -> DepthMap {
    let cos_max = max_angle_deg.to_radians().cos();
    let mut out = depth.clone();
    for v in 0..depth.height {
        for u in 0..depth.width {
            let i = depth.idx(u, v);
            if depth.depth[i] <= 0.0 {
                continue;
            }
            let dir_cam = Vector3::new(
                (u as f64 + 0.5 - cam.cx) / cam.fx,
                (v as f64 + 0.5 - cam.cy) / cam.fy,
                1.0,
            )
            .normalize();
            let cos_angle = depth.normal[i].dot(&(-dir_cam));
            if cos_angle < cos_max - 1e-12 {
                out.depth[i] = 0.0;
                out.normal[i] = Vector3::zeros();
            }
        }
    }
    out
}

/// March every camera ray to the first positive-to-negative crossing and
/// build surfels there: position by linear interpolation, normal from the
/// tsdf gradient, radius from depth and pixel footprint. Duplicate hits
/// from different cameras within one voxel of each other are averaged.
pub fn raycast_extract(
    vol: &TsdfVolume,
    cams: &[CameraModel],
    scene: &SceneSnapshot,
    params: &MeasureParams,
) -> Vec<MeasurementSurfel> {
    let mut raw: Vec<MeasurementSurfel> = Vec::new();
    for cam in cams {
        let origin = cam.center();
        let rows: Vec<Vec<MeasurementSurfel>> = (0..cam.height)
            .into_par_iter()
            .map(|v| {
                let mut row = Vec::new();
                for u in 0..cam.width {
                    let (dir, z_per_len) = cam.pixel_ray(u, v);
                    let t0 = params.z_near / z_per_len;
                    let t1 = params.z_far / z_per_len;
                    let Some(t) = march_ray(vol, &origin, &dir, t0, t1) else {
                        continue;
                    };
                    let p = origin + dir * t;
                    let Some(grad) = vol.gradient(&p) else { continue };
                    let gn = grad.norm();
                    if gn < 1e-12 {
                        continue;
                    }
                    let normal = grad / gn;
                    let z = t * z_per_len;
                    let cos_theta = normal.dot(&(-dir)).max(0.3);
                    let radius = z / cam.fx / cos_theta;
                    let color = scene
                        .sdf(&p)
                        .map(|(_, prim)| scene.instances[prim].color)
                        .unwrap_or([0.5, 0.5, 0.5]);
                    row.push(MeasurementSurfel {
                        position: p,
                        normal,
                        color,
                        radius,
                        confidence: 1.0,
                    });
                }
                row
            })
            .collect();
        for row in rows {
            raw.extend(row);
        }
    }
    merge_duplicates(raw, vol.voxel)
}

/// Average surfels that fall within `radius` of an earlier-kept surfel.
fn merge_duplicates(raw: Vec<MeasurementSurfel>, radius: f64) -> Vec<MeasurementSurfel> {
    let mut grid = crate::grid::SpatialGrid::new(radius.max(1e-6));
    let mut merged: Vec<MeasurementSurfel> = Vec::with_capacity(raw.len());
    let mut counts: Vec<f64> = Vec::with_capacity(raw.len());
    for s in raw {
        let mut target: Option<u32> = None;
        grid.for_each_within(&s.position, radius, |idx, _| {
            if target.is_none() {
                target = Some(idx);
            }
        });
        match target {
            Some(idx) => {
                let i = idx as usize;
                let n = counts[i];
                let m = &mut merged[i];
                m.position = (m.position * n + s.position) / (n + 1.0);
                let blended = m.normal * n + s.normal;
                if blended.norm() > 1e-9 {
                    m.normal = blended.normalize();
                }
                m.radius = (m.radius * n + s.radius) / (n + 1.0);
                for c in 0..3 {
                    m.color[c] = ((m.color[c] as f64 * n + s.color[c] as f64) / (n + 1.0)) as f32;
                }
                counts[i] = n + 1.0;
            }
            None => {
                grid.insert(s.position);
                merged.push(s);
                counts.push(1.0);
            }
        }
    }
    merged
}

/// Run the whole measurement stage for one frame.
pub fn measure_frame(
    scene: &SceneSnapshot,
    cams: &[CameraModel],
    bounds: (Vector3<f64>, Vector3<f64>),
    params: &MeasureParams,
    frame: u32,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> MeasurementFrame {
    let mut depths = Vec::with_capacity(cams.len());
    for cam in cams {
        let mut d = render_depth(scene, cam, params.z_near, params.z_far);
        add_noise(&mut d, noise_sigma, rng);
        depths.push(view_angle_filter(&d, cam, params.view_angle_max_deg));
    }
    let mut vol = TsdfVolume::new(bounds.0, bounds.1, params.voxel_size, params.tau());
    for (cam, d) in cams.iter().zip(&depths) {
        vol.integrate(d, cam, params.w_max);
    }
    let surfels = raycast_extract(&vol, cams, scene, params);
    MeasurementFrame { surfels, depths, frame }
}
