//! Frame-to-frame non-rigid alignment: render the model into each camera,
//! search windowed correspondences against the measured depth, and minimize
//! point-to-plane depth error plus an as-rigid-as-possible graph term.

pub mod solver;

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraModel, DepthMap};
use crate::model::{warp_graph_nodes, warp_surfel, DeformationGraph, Surfel, WarpError, WarpField};

pub use solver::{solve_warp, AlignmentProblem, SolveReport, SolverError};

/// Alignment parameters. `lambda` trades depth fit against rigidity; it is
/// kept small so topology can tear apart.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lambda: f64,
    pub max_iterations: usize,
    /// Initial Levenberg-Marquardt damping.
    pub damping: f64,
    /// Relative energy decrease below which iteration stops.
    pub tolerance: f64,
    /// Half-width sigma of the pixel search window (pixels).
    pub search_radius: usize,
    /// Correspondence position cutoff, meters.
    pub gamma_distance: f64,
    /// Correspondence normal cutoff, cosine.
    pub gamma_normal: f64,
    /// PCG iteration cap factor (cap = factor * node count).
    pub pcg_iteration_factor: usize,
    pub pcg_tolerance: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            max_iterations: 8,
            damping: 1e-4,
            tolerance: 1e-4,
            search_radius: 2,
            gamma_distance: 0.03,
            gamma_normal: 30f64.to_radians().cos(),
            pcg_iteration_factor: 10,
            pcg_tolerance: 1e-6,
        }
    }
}

/// Rendered view of the model surfels in one camera: per-pixel index of the
/// nearest surfel plus its camera depth.
#[derive(Debug, Clone)]
pub struct GeometryMaps {
    pub width: usize,
    pub height: usize,
    /// Surfel index per pixel; u32::MAX marks empty.
    pub index: Vec<u32>,
    pub depth: Vec<f64>,
}

pub const EMPTY_PIXEL: u32 = u32::MAX;

impl GeometryMaps {
    #[inline]
    pub fn at(&self, u: usize, v: usize) -> Option<u32> {
        let i = self.index[v * self.width + u];
        (i != EMPTY_PIXEL).then_some(i)
    }
}

/// Project every surfel into every camera keeping the nearest surfel per
/// pixel. Map resolution equals the camera resolution.
pub fn render_geometry_maps(surfels: &[Surfel], cams: &[CameraModel]) -> Vec<GeometryMaps> {
    cams.par_iter()
        .map(|cam| {
            let mut maps = GeometryMaps {
                width: cam.width,
                height: cam.height,
                index: vec![EMPTY_PIXEL; cam.width * cam.height],
                depth: vec![f64::INFINITY; cam.width * cam.height],
            };
            for (i, s) in surfels.iter().enumerate() {
                let Some((u, v, z)) = cam.project(&s.position) else {
                    continue;
                };
                if u < 0.0 || v < 0.0 {
                    continue;
                }
                let (ui, vi) = (u as usize, v as usize);
                if ui >= cam.width || vi >= cam.height {
                    continue;
                }
                let px = vi * cam.width + ui;
                if z < maps.depth[px] {
                    maps.depth[px] = z;
                    maps.index[px] = i as u32;
                }
            }
            maps
        })
        .collect()
}

/// One point-to-plane constraint: a model surfel paired with a measured
/// depth point seen from one camera.
#[derive(Debug, Clone, Copy)]
pub struct CorrespondencePair {
    pub surfel: usize,
    pub cam: usize,
    /// Measured point, world frame.
    pub measured_point: Vector3<f64>,
    /// Measured unit normal, world frame.
    pub measured_normal: Vector3<f64>,
}

/// For each valid rendered pixel, search the (2 sigma + 1)^2 window of the
/// measured depth map and keep the nearest candidate passing both the
/// distance and the normal threshold.
pub fn find_correspondences(
    surfels: &[Surfel],
    maps: &[GeometryMaps],
    depths: &[DepthMap],
    cams: &[CameraModel],
    cfg: &SolverConfig,
) -> Vec<CorrespondencePair> {
    assert_eq!(maps.len(), depths.len());
    let mut out = Vec::new();
    for (cam_idx, ((map, depth), cam)) in maps.iter().zip(depths).zip(cams).enumerate() {
        debug_assert_eq!(map.width, depth.width);
        debug_assert_eq!(map.height, depth.height);
        let rows: Vec<Vec<CorrespondencePair>> = (0..map.height)
            .into_par_iter()
            .map(|v| {
                let mut row = Vec::new();
                for u in 0..map.width {
                    let Some(surfel_idx) = map.at(u, v) else { continue };
                    let s = &surfels[surfel_idx as usize];
                    if let Some(best) = best_in_window(s, depth, cam, u, v, cfg) {
                        row.push(CorrespondencePair {
                            surfel: surfel_idx as usize,
                            cam: cam_idx,
                            measured_point: best.0,
                            measured_normal: best.1,
                        });
                    }
                }
                row
            })
            .collect();
        for row in rows {
            out.extend(row);
        }
    }
    out
}

fn best_in_window(
    s: &Surfel,
    depth: &DepthMap,
    cam: &CameraModel,
    u: usize,
    v: usize,
    cfg: &SolverConfig,
) -> Option<(Vector3<f64>, Vector3<f64>)> {
    let sigma = cfg.search_radius as isize;
    let mut best: Option<(f64, Vector3<f64>, Vector3<f64>)> = None;
    for dv in -sigma..=sigma {
        for du in -sigma..=sigma {
            let (du, dv) = (u as isize + du, v as isize + dv);
            if du < 0 || dv < 0 || du as usize >= depth.width || dv as usize >= depth.height {
                continue;
            }
            let (du, dv) = (du as usize, dv as usize);
            let i = depth.idx(du, dv);
            let d = depth.depth[i];
            if d <= 0.0 {
                continue;
            }
            let point = cam.backproject(du as f64 + 0.5, dv as f64 + 0.5, d);
            let dist = (point - s.position).norm();
            if dist > cfg.gamma_distance {
                continue;
            }
            let normal = cam.dir_to_world(&depth.normal[i]);
            if s.normal.dot(&normal) < cfg.gamma_normal {
                continue;
            }
            if best.as_ref().map_or(true, |(bd, _, _)| dist < *bd) {
                best = Some((dist, point, normal));
            }
        }
    }
    best.map(|(_, p, n)| (p, n))
}

/// Warp all surfels and advance the graph (Eq. 7 consumption of the field
/// into node positions).
pub fn apply_alignment(
    surfels: &[Surfel],
    graph: &DeformationGraph,
    warp: &WarpField,
) -> Result<(Vec<Surfel>, DeformationGraph), WarpError> {
    let warped: Result<Vec<Surfel>, WarpError> = surfels
        .par_iter()
        .map(|s| warp_surfel(s, warp, graph))
        .collect();
    let graph_out = warp_graph_nodes(graph, warp)?;
    Ok((warped?, graph_out))
}
