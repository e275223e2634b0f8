//! Geometry and graph update: reconcile the aligned model with the fused
//! measurement. Matched surfels are averaged, newly observed surface is
//! appended (with graph growth and historical-distance seeding), outliers
//! are removed, and nodes whose support collapses trigger local
//! re-initialization.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::Vector3;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::camera::CameraModel;
use crate::grid::SpatialGrid;
use crate::measure::MeasurementFrame;
use crate::model::{DeformationGraph, HistoricalDistance, NodeId, Surfel};

/// Index maps are rendered at this multiple of the camera resolution so
/// nearby surfels land on distinct pixels.
pub const SUPERSAMPLE: usize = 4;

#[derive(Debug, Error, PartialEq)]
pub enum UpdateError {
    #[error("cannot append: the deformation graph is empty")]
    EmptyGraph,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UpdateConfig {
    /// Registration position cutoff, meters (shared with alignment).
    pub gamma_distance: f64,
    /// Registration normal cutoff, cosine (shared with alignment).
    pub gamma_normal: f64,
    /// Max distance from an append candidate to its nearest node, meters.
    pub gamma_nn: f64,
    /// Free-space / duplicate-surface margin, meters.
    pub gamma_inlier: f64,
    /// Compression: historical distance above this, meters.
    pub gamma_upper: f64,
    /// Compression: current distance below this, meters.
    pub gamma_lower: f64,
    /// Removed-surfel count beyond which a node is deleted.
    pub gamma_remove: u32,
    /// Node sampling radius, meters.
    pub r_sample: f64,
    /// Confidence below which an old unmatched surfel counts as unstable.
    pub conf_stable: f64,
    /// Frames without observation before an unstable surfel is removed.
    pub t_stale: u32,
}

impl Default for UpdateConfig {
    fn default() -> Self {
        Self {
            gamma_distance: 0.03,
            gamma_normal: 30f64.to_radians().cos(),
            gamma_nn: 0.05,
            gamma_inlier: 0.01,
            gamma_upper: 0.10,
            gamma_lower: 0.02,
            gamma_remove: 20,
            r_sample: 0.025,
            conf_stable: 10.0,
            t_stale: 30,
        }
    }
}

impl UpdateConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.gamma_lower >= self.gamma_upper {
            return Err("gamma_lower must be below gamma_upper".into());
        }
        if self.gamma_remove < 1 {
            return Err("gamma_remove must be at least 1".into());
        }
        if self.r_sample <= 0.0 {
            return Err("r_sample must be positive".into());
        }
        Ok(())
    }

    pub fn node_delta(&self) -> f64 {
        2.0 * self.r_sample
    }
}

/// Supersampled per-camera render of a point set: nearest item per pixel.
#[derive(Debug, Clone)]
pub struct IndexMap {
    /// Native camera resolution; storage is SUPERSAMPLE times larger.
    pub width: usize,
    pub height: usize,
    pub index: Vec<u32>,
    pub depth: Vec<f64>,
}

pub const EMPTY: u32 = u32::MAX;

impl IndexMap {
    fn render(positions: &[Vector3<f64>], cam: &CameraModel) -> Self {
        let (sw, sh) = (cam.width * SUPERSAMPLE, cam.height * SUPERSAMPLE);
        let mut index = vec![EMPTY; sw * sh];
        let mut depth = vec![f64::INFINITY; sw * sh];
        for (i, p) in positions.iter().enumerate() {
            let Some((u, v, z)) = cam.project(p) else { continue };
            if u < 0.0 || v < 0.0 {
                continue;
            }
            let (su, sv) = ((u * SUPERSAMPLE as f64) as usize, (v * SUPERSAMPLE as f64) as usize);
            if su >= sw || sv >= sh {
                continue;
            }
            let px = sv * sw + su;
            if z < depth[px] {
                depth[px] = z;
                index[px] = i as u32;
            }
        }
        Self { width: cam.width, height: cam.height, index, depth }
    }

    /// Visit the 4x4 supersampled block covering native pixel (u, v).
    pub fn for_each_in_block(&self, u: usize, v: usize, mut f: impl FnMut(u32, f64)) {
        let sw = self.width * SUPERSAMPLE;
        for sv in v * SUPERSAMPLE..(v + 1) * SUPERSAMPLE {
            for su in u * SUPERSAMPLE..(u + 1) * SUPERSAMPLE {
                let px = sv * sw + su;
                if self.index[px] != EMPTY {
                    f(self.index[px], self.depth[px]);
                }
            }
        }
    }
}

/// Registration result: index pairs into the aligned surfel array and the
/// measurement surfel array, plus both complements.
#[derive(Debug, Clone, Default)]
pub struct Registration {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_geometry: Vec<usize>,
    pub unmatched_measurement: Vec<usize>,
    /// Geometry index maps, kept for the append stage's duplicate check.
    pub geometry_maps: Vec<IndexMap>,
}

/// Match aligned geometry against the fused measurement, camera by camera:
/// the measurement is rendered at native resolution, the geometry at 4x
/// supersampling; each measured pixel searches its 4x4 geometry block and
/// keeps the nearest candidate passing the distance and normal gates. Each
/// surfel on either side matches at most once (first camera wins).
pub fn register(
    aligned: &[Surfel],
    m: &MeasurementFrame,
    cams: &[CameraModel],
    cfg: &UpdateConfig,
) -> Registration {
    let geom_positions: Vec<Vector3<f64>> = aligned.iter().map(|s| s.position).collect();
    let meas_positions: Vec<Vector3<f64>> = m.surfels.iter().map(|s| s.position).collect();

    let geometry_maps: Vec<IndexMap> = cams
        .par_iter()
        .map(|cam| IndexMap::render(&geom_positions, cam))
        .collect();
    let measurement_maps: Vec<IndexMap> = cams
        .par_iter()
        .map(|cam| IndexMap::render(&meas_positions, cam))
        .collect();

    let mut geom_matched = vec![false; aligned.len()];
    let mut meas_matched = vec![false; m.surfels.len()];
    let mut pairs = Vec::new();

    for (gmap, mmap) in geometry_maps.iter().zip(&measurement_maps) {
        let sw = mmap.width * SUPERSAMPLE;
        for v in 0..mmap.height {
            for u in 0..mmap.width {
                // The measurement map is also supersampled storage; scan the
                // native pixel's block for measured surfels.
                let mut meas_here: Vec<u32> = Vec::new();
                for sv in v * SUPERSAMPLE..(v + 1) * SUPERSAMPLE {
                    for su in u * SUPERSAMPLE..(u + 1) * SUPERSAMPLE {
                        let idx = mmap.index[sv * sw + su];
                        if idx != EMPTY && !meas_matched[idx as usize] {
                            meas_here.push(idx);
                        }
                    }
                }
                for mi in meas_here {
                    let ms = &m.surfels[mi as usize];
                    let mut best: Option<(f64, u32)> = None;
                    gmap.for_each_in_block(u, v, |gi, _| {
                        if geom_matched[gi as usize] {
                            return;
                        }
                        let gs = &aligned[gi as usize];
                        let dist = (gs.position - ms.position).norm();
                        if dist > cfg.gamma_distance {
                            return;
                        }
                        if gs.normal.dot(&ms.normal) < cfg.gamma_normal {
                            return;
                        }
                        if best.map_or(true, |(bd, bi)| dist < bd || (dist == bd && gi < bi)) {
                            best = Some((dist, gi));
                        }
                    });
                    if let Some((_, gi)) = best {
                        geom_matched[gi as usize] = true;
                        meas_matched[mi as usize] = true;
                        pairs.push((gi as usize, mi as usize));
                    }
                }
            }
        }
    }

    Registration {
        pairs,
        unmatched_geometry: (0..aligned.len()).filter(|&i| !geom_matched[i]).collect(),
        unmatched_measurement: (0..m.surfels.len()).filter(|&i| !meas_matched[i]).collect(),
        geometry_maps,
    }
}

/// Confidence-weighted averaging of matched pairs, in place on the aligned
/// buffer: position, normal (renormalized) and radius first, then timestamp
/// and confidence.
pub fn fuse_matched(aligned: &mut [Surfel], m: &MeasurementFrame, pairs: &[(usize, usize)]) {
    for &(gi, mi) in pairs {
        let g = &mut aligned[gi];
        let s = &m.surfels[mi];
        let (ca, cm) = (g.confidence, s.confidence);
        let total = ca + cm;
        g.position = (g.position * ca + s.position * cm) / total;
        let blended = g.normal * ca + s.normal * cm;
        if blended.norm() > 1e-12 {
            g.normal = blended / blended.norm();
        }
        g.radius = (g.radius * ca + s.radius * cm) / total;
        g.timestamp = m.frame;
        g.confidence = total;
    }
}

/// Nodes currently compressed: far in history (d_h above gamma_upper) from
/// some counterpart that is near right now (below gamma_lower). Both ends
/// of such a pair are flagged.
pub fn detect_compressed(
    graph: &DeformationGraph,
    dh: &HistoricalDistance,
    cfg: &UpdateConfig,
) -> BTreeSet<NodeId> {
    let mut out = BTreeSet::new();
    dh.for_each_pair(|a, b, hist| {
        if hist > cfg.gamma_upper {
            let pa = graph.node(a).expect("dh tracks live nodes").position;
            let pb = graph.node(b).expect("dh tracks live nodes").position;
            if (pa - pb).norm() < cfg.gamma_lower {
                out.insert(a);
                out.insert(b);
            }
        }
    });
    out
}

#[derive(Debug, Clone, Default)]
pub struct AppendOutcome {
    pub appended: Vec<Surfel>,
    pub new_nodes: Vec<NodeId>,
    pub rejected_far_from_graph: usize,
    pub rejected_compressed_support: usize,
    pub rejected_duplicate_surface: usize,
    /// Appends whose final support landed in the compressed set; the append
    /// criteria make this zero, and the event log asserts it.
    pub appended_with_compressed_support: usize,
}

/// Append unmatched measurement surfels that pass the three gates, grow the
/// graph with spatially uniform new nodes where coverage is missing, and
/// seed historical distances for the new nodes from their nearest
/// neighbor's history (triangle-inequality lower bound).
#[allow(clippy::too_many_arguments)]
pub fn append_measurement(
    unmatched_measurement: &[usize],
    m: &MeasurementFrame,
    graph: &mut DeformationGraph,
    dh: &mut HistoricalDistance,
    compressed: &BTreeSet<NodeId>,
    geometry_maps: &[IndexMap],
    cams: &[CameraModel],
    cfg: &UpdateConfig,
) -> Result<AppendOutcome, UpdateError> {
    if graph.is_empty() {
        return Err(UpdateError::EmptyGraph);
    }
    let mut out = AppendOutcome::default();

    // Node lookup grid; cell size gamma_nn supports both query radii used
    // here (gamma_nn and r_sample <= gamma_nn assumed; fall back to the
    // larger of the two).
    let cell = cfg.gamma_nn.max(cfg.r_sample);
    let mut node_grid = SpatialGrid::new(cell);
    let mut grid_ids: Vec<NodeId> = Vec::with_capacity(graph.len());
    for n in graph.nodes() {
        node_grid.insert(n.position);
        grid_ids.push(n.id);
    }

    let nearest_node = |grid: &SpatialGrid, ids: &[NodeId], p: &Vector3<f64>, radius: f64| {
        let mut best: Option<(f64, NodeId)> = None;
        grid.for_each_within(p, radius, |idx, d| {
            let id = ids[idx as usize];
            if best.map_or(true, |(bd, bid)| d < bd || (d == bd && id < bid)) {
                best = Some((d, id));
            }
        });
        best
    };

    // Pass 1: gate candidates.
    let mut accepted: Vec<usize> = Vec::new();
    for &mi in unmatched_measurement {
        let ms = &m.surfels[mi];
        // (1) must be near the existing graph.
        let Some((_, support)) = nearest_node(&node_grid, &grid_ids, &ms.position, cfg.gamma_nn)
        else {
            out.rejected_far_from_graph += 1;
            continue;
        };
        // (2) support must not be compressed.
        if compressed.contains(&support) {
            out.rejected_compressed_support += 1;
            continue;
        }
        // (3) duplicate-surface guard: if every nearby rendered geometry
        // surfel sits within gamma_inlier along the view direction, the
        // candidate duplicates an existing surface.
        let mut nearby = 0usize;
        let mut max_dz = 0.0f64;
        for (cam, gmap) in cams.iter().zip(geometry_maps) {
            let Some((u, v, z)) = cam.project(&ms.position) else { continue };
            if u < 0.0 || v < 0.0 {
                continue;
            }
            let (ui, vi) = (u as usize, v as usize);
            if ui >= cam.width || vi >= cam.height {
                continue;
            }
            gmap.for_each_in_block(ui, vi, |_, gz| {
                nearby += 1;
                max_dz = max_dz.max((gz - z).abs());
            });
        }
        if nearby > 0 && max_dz < cfg.gamma_inlier {
            out.rejected_duplicate_surface += 1;
            continue;
        }
        accepted.push(mi);
    }

    // Pass 2: pool accepted surfels not covered by any node, then greedy
    // Poisson-disk sampling at r_sample to mint new nodes.
    let mut pooled: Vec<usize> = Vec::new();
    for &mi in &accepted {
        let p = &m.surfels[mi].position;
        if nearest_node(&node_grid, &grid_ids, p, cfg.r_sample).is_none() {
            pooled.push(mi);
        }
    }
    for &mi in &pooled {
        let p = m.surfels[mi].position;
        if nearest_node(&node_grid, &grid_ids, &p, cfg.r_sample).is_some() {
            continue; // covered by a node added earlier in this pass
        }
        // Seed d_h from the nearest node's history before inserting.
        let (_, anchor) = nearest_node(&node_grid, &grid_ids, &p, cell)
            .or_else(|| graph.nearest_node(&p).map(|(id, d)| (d, id)))
            .expect("graph is non-empty");
        let anchor_pos = graph.node(anchor).unwrap().position;
        let d_anchor = (anchor_pos - p).norm();
        let id = graph.add_node(p, cfg.node_delta());
        let seeds: Vec<(NodeId, f64)> = dh
            .ids()
            .iter()
            .map(|&other| {
                let other_pos = graph.node(other).unwrap().position;
                let lower = dh.get(anchor, other) - d_anchor;
                (other, lower.max((other_pos - p).norm()))
            })
            .collect();
        let mut seed_map: BTreeMap<NodeId, f64> = seeds.into_iter().collect();
        dh.add_node(id, |other| seed_map.remove(&other).unwrap_or(0.0));
        node_grid.insert(p);
        grid_ids.push(id);
        out.new_nodes.push(id);
    }

    // Pass 3: materialize surfels with supports assigned against the grown
    // node set.
    for &mi in &accepted {
        let ms = &m.surfels[mi];
        let (_, support) = nearest_node(&node_grid, &grid_ids, &ms.position, cell)
            .or_else(|| graph.nearest_node(&ms.position).map(|(id, d)| (d, id)))
            .expect("graph is non-empty");
        if compressed.contains(&support) {
            out.appended_with_compressed_support += 1;
        }
        out.appended.push(Surfel {
            position: ms.position,
            normal: ms.normal,
            color: ms.color,
            radius: ms.radius,
            confidence: 1.0,
            timestamp: m.frame,
            support,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Default)]
pub struct RemovalOutcome {
    /// Indices (into the surfel buffer) removed this pass.
    pub removed: Vec<usize>,
    /// Removed-surfel count per support node.
    pub counts: BTreeMap<NodeId, u32>,
    pub removed_unstable: usize,
    pub removed_overlap: usize,
    pub removed_free_space: usize,
}

/// Classify unmatched geometry surfels for removal: long-unstable, overlap
/// with a more confident near-duplicate, or free-space violation (the
/// measurement sees through them). Matched surfels are never candidates.
pub fn remove_surfels(
    surfels: &[Surfel],
    unmatched_geometry: &[usize],
    m: &MeasurementFrame,
    cams: &[CameraModel],
    frame: u32,
    cfg: &UpdateConfig,
) -> RemovalOutcome {
    let max_radius = surfels.iter().map(|s| s.radius).fold(0.0f64, f64::max);
    let cell = (max_radius / 2.0).max(1e-4);
    let mut grid = SpatialGrid::new(cell);
    for s in surfels {
        grid.insert(s.position);
    }

    let flags: Vec<Option<u8>> = unmatched_geometry
        .par_iter()
        .map(|&idx| {
            let s = &surfels[idx];
            // (a) unstable for a long time.
            if s.confidence < cfg.conf_stable && frame.saturating_sub(s.timestamp) > cfg.t_stale {
                return Some(0);
            }
            // (b) overlapped by a strictly more confident nearshell surfel
            // with an equal-or-opposing normal.
            let mut overlapped = false;
            grid.for_each_within(&s.position, s.radius / 2.0, |other, _| {
                if overlapped || other as usize == idx {
                    return;
                }
                let o = &surfels[other as usize];
                if o.confidence > s.confidence && s.normal.dot(&o.normal).abs() >= cfg.gamma_normal
                {
                    overlapped = true;
                }
            });
            if overlapped {
                return Some(1);
            }
            // (c) free-space violation in any camera.
            for (cam, depth) in cams.iter().zip(&m.depths) {
                let Some((u, v, z)) = cam.project(&s.position) else { continue };
                if u < 0.0 || v < 0.0 {
                    continue;
                }
                let (ui, vi) = (u as usize, v as usize);
                if ui >= depth.width || vi >= depth.height {
                    continue;
                }
                let d = depth.depth[depth.idx(ui, vi)];
                if d > 0.0 && z < d - cfg.gamma_inlier {
                    return Some(2);
                }
            }
            None
        })
        .collect();

    let mut out = RemovalOutcome::default();
    for (&idx, flag) in unmatched_geometry.iter().zip(&flags) {
        if let Some(reason) = flag {
            out.removed.push(idx);
            *out.counts.entry(surfels[idx].support).or_insert(0) += 1;
            match reason {
                0 => out.removed_unstable += 1,
                1 => out.removed_overlap += 1,
                _ => out.removed_free_space += 1,
            }
        }
    }
    out
}

/// Delete nodes whose removal counter passed gamma_remove together with all
/// surfels they support (local re-initialization), then rebuild neighbor
/// lists under the historical distance.
pub fn remove_nodes(
    graph: &mut DeformationGraph,
    dh: &mut HistoricalDistance,
    surfels: &mut Vec<Surfel>,
    counts: &BTreeMap<NodeId, u32>,
    cfg: &UpdateConfig,
) -> Vec<NodeId> {
    let doomed: Vec<NodeId> = counts
        .iter()
        .filter(|(_, &c)| c > cfg.gamma_remove)
        .map(|(&id, _)| id)
        .collect();
    if doomed.is_empty() {
        return doomed;
    }
    let dead: BTreeSet<NodeId> = doomed.iter().copied().collect();
    graph.remove_nodes(&doomed);
    dh.remove_nodes(&doomed);
    surfels.retain(|s| !dead.contains(&s.support));
    rebuild_knn_under_dh(graph, dh);
    doomed
}

/// Drop nodes that no longer support any surfel (their components were
/// emptied by removal); called at the start of the next frame.
pub fn garbage_collect_orphan_nodes(
    graph: &mut DeformationGraph,
    dh: &mut HistoricalDistance,
    surfels: &[Surfel],
) -> Vec<NodeId> {
    let mut supported: BTreeSet<NodeId> = BTreeSet::new();
    for s in surfels {
        supported.insert(s.support);
    }
    let orphans: Vec<NodeId> = graph
        .nodes()
        .iter()
        .map(|n| n.id)
        .filter(|id| !supported.contains(id))
        .collect();
    if !orphans.is_empty() {
        graph.remove_nodes(&orphans);
        dh.remove_nodes(&orphans);
        rebuild_knn_under_dh(graph, dh);
    }
    orphans
}

/// Grow every surviving pair's historical distance to at least the current
/// Euclidean distance (the max rule).
pub fn update_historical_distance(dh: &mut HistoricalDistance, graph: &DeformationGraph) {
    dh.observe_positions(graph);
}

pub fn rebuild_knn_under_dh(graph: &mut DeformationGraph, dh: &HistoricalDistance) {
    graph.rebuild_knn(|a, b| dh.get(a, b));
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::DepthMap;
    use crate::measure::MeasurementSurfel;
    use approx::assert_relative_eq;

    fn cam() -> CameraModel {
        CameraModel::look_at(
            60.0,
            60.0,
            32.0,
            24.0,
            64,
            48,
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 1.0, 0.0),
        )
    }

    fn surfel(p: [f64; 3], support: u32) -> Surfel {
        Surfel {
            position: Vector3::from(p),
            normal: Vector3::new(0.0, 0.0, -1.0),
            color: [0.5; 3],
            radius: 0.004,
            confidence: 1.0,
            timestamp: 0,
            support: NodeId(support),
        }
    }

    fn msurfel(p: [f64; 3]) -> MeasurementSurfel {
        MeasurementSurfel {
            position: Vector3::from(p),
            normal: Vector3::new(0.0, 0.0, -1.0),
            color: [0.5; 3],
            radius: 0.004,
            confidence: 1.0,
        }
    }

    fn frame_of(surfels: Vec<MeasurementSurfel>, cam: &CameraModel, frame: u32) -> MeasurementFrame {
        MeasurementFrame {
            surfels,
            depths: vec![DepthMap::invalid(cam.width, cam.height)],
            frame,
        }
    }

    fn grid_points(n: usize, spacing: f64, z: f64) -> Vec<[f64; 3]> {
        let mut pts = Vec::new();
        for i in 0..n {
            for j in 0..n {
                pts.push([
                    (i as f64 - n as f64 / 2.0) * spacing,
                    (j as f64 - n as f64 / 2.0) * spacing,
                    z,
                ]);
            }
        }
        pts
    }

    #[test]
    fn identical_sets_match_completely() {
        let c = cam();
        let cfg = UpdateConfig::default();
        let pts = grid_points(6, 0.02, 1.0);
        let aligned: Vec<Surfel> = pts.iter().map(|p| surfel(*p, 0)).collect();
        let m = frame_of(pts.iter().map(|p| msurfel(*p)).collect(), &c, 1);
        let reg = register(&aligned, &m, &[c], &cfg);
        assert_eq!(reg.pairs.len(), aligned.len());
        assert!(reg.unmatched_geometry.is_empty());
        assert!(reg.unmatched_measurement.is_empty());
    }

    #[test]
    fn displaced_measurement_matches_nothing() {
        let c = cam();
        let cfg = UpdateConfig::default();
        let pts = grid_points(4, 0.03, 1.0);
        let aligned: Vec<Surfel> = pts.iter().map(|p| surfel(*p, 0)).collect();
        let shifted: Vec<MeasurementSurfel> = pts
            .iter()
            .map(|p| msurfel([p[0], p[1], p[2] + 3.0 * cfg.gamma_distance]))
            .collect();
        let m = frame_of(shifted, &c, 1);
        let reg = register(&aligned, &m, &[c], &cfg);
        assert!(reg.pairs.is_empty());
        assert_eq!(reg.unmatched_geometry.len(), aligned.len());
        assert_eq!(reg.unmatched_measurement.len(), m.surfels.len());
    }

    /// Exhaustive matcher oracle on a crafted small image: candidates for a
    /// measured surfel are the geometry surfels landing in the same 4x4
    /// supersampled block; criteria (1)-(3) then pick the nearest.
    #[test]
    fn register_matches_exhaustive_oracle() {
        let c = CameraModel::look_at(
            8.0,
            8.0,
            4.0,
            4.0,
            16,
            16,
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            Vector3::new(0.0, 1.0, 0.0),
        );
        let cfg = UpdateConfig::default();
        let aligned = vec![
            surfel([0.0, 0.0, 1.0], 0),
            surfel([0.004, 0.0, 1.0], 0),
            surfel([0.25, 0.25, 1.0], 0),
            surfel([-0.25, 0.1, 1.0], 0),
        ];
        let m = frame_of(
            vec![
                msurfel([0.002, 0.0, 1.0]),
                msurfel([0.25, 0.25, 1.002]),
                msurfel([0.5, -0.5, 1.0]),
            ],
            &c,
            1,
        );
        let reg = register(&aligned, &m, &[c.clone()], &cfg);

        // Oracle: recompute blocks and criteria from scratch.
        let block_of = |p: &Vector3<f64>| {
            let (u, v, _) = c.project(p).unwrap();
            ((u as usize), (v as usize))
        };
        let mut taken_g = vec![false; aligned.len()];
        let mut expected = Vec::new();
        for (mi, ms) in m.surfels.iter().enumerate() {
            let (mu, mv) = block_of(&ms.position);
            let mut best: Option<(f64, usize)> = None;
            for (gi, gs) in aligned.iter().enumerate() {
                if taken_g[gi] {
                    continue;
                }
                let (gu, gv) = block_of(&gs.position);
                if (gu, gv) != (mu, mv) {
                    continue;
                }
                let dist = (gs.position - ms.position).norm();
                if dist > cfg.gamma_distance || gs.normal.dot(&ms.normal) < cfg.gamma_normal {
                    continue;
                }
                if best.map_or(true, |(bd, _)| dist < bd) {
                    best = Some((dist, gi));
                }
            }
            if let Some((_, gi)) = best {
                taken_g[gi] = true;
                expected.push((gi, mi));
            }
        }
        let mut got = reg.pairs.clone();
        got.sort_unstable();
        expected.sort_unstable();
        assert_eq!(got, expected);
    }

    #[test]
    fn register_is_deterministic() {
        let c = cam();
        let cfg = UpdateConfig::default();
        let pts = grid_points(8, 0.015, 1.0);
        let aligned: Vec<Surfel> = pts.iter().map(|p| surfel(*p, 0)).collect();
        let m = frame_of(
            pts.iter().map(|p| msurfel([p[0] + 0.001, p[1], p[2]])).collect(),
            &c,
            1,
        );
        let a = register(&aligned, &m, &[c.clone()], &cfg);
        let b = register(&aligned, &m, &[c], &cfg);
        assert_eq!(a.pairs, b.pairs);
        assert_eq!(a.unmatched_geometry, b.unmatched_geometry);
        assert_eq!(a.unmatched_measurement, b.unmatched_measurement);
    }

    #[test]
    fn fusion_formulas_match_hand_computed_cases() {
        let c = cam();
        let mut aligned = vec![surfel([0.0, 0.0, 0.0], 0), surfel([0.0, 0.0, 0.0], 0)];
        aligned[1].confidence = 3.0;
        aligned[1].radius = 0.001;
        let mut m = frame_of(
            vec![msurfel([2.0, 0.0, 0.0]), msurfel([0.0, 0.0, 0.0])],
            &c,
            7,
        );
        m.surfels[1].radius = 0.005;
        fuse_matched(&mut aligned, &m, &[(0, 0), (1, 1)]);

        // c_align=1, v_align=0, c_M=1, v_M=(2,0,0) -> v=(1,0,0), conf=2.
        assert_relative_eq!(aligned[0].position, Vector3::new(1.0, 0.0, 0.0), epsilon = 1e-9);
        assert_relative_eq!(aligned[0].confidence, 2.0, epsilon = 1e-9);
        assert_eq!(aligned[0].timestamp, 7);
        // c_align=3, r=1mm; c_M=1, r=5mm -> 2mm.
        assert_relative_eq!(aligned[1].radius, 0.002, epsilon = 1e-9);
        // Agreeing normals stay fixed.
        assert_relative_eq!(aligned[0].normal, Vector3::new(0.0, 0.0, -1.0), epsilon = 1e-9);
        assert_relative_eq!(aligned[0].normal.norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn confidence_mass_is_conserved_by_fusion() {
        let c = cam();
        let pts = grid_points(5, 0.02, 1.0);
        let mut aligned: Vec<Surfel> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                let mut s = surfel(*p, 0);
                s.confidence = 1.0 + i as f64 * 0.5;
                s
            })
            .collect();
        let m = frame_of(pts.iter().map(|p| msurfel(*p)).collect(), &c, 2);
        let cfg = UpdateConfig::default();
        let reg = register(&aligned, &m, &[c], &cfg);
        let before: f64 = reg
            .pairs
            .iter()
            .map(|&(g, mi)| aligned[g].confidence + m.surfels[mi].confidence)
            .sum();
        fuse_matched(&mut aligned, &m, &reg.pairs);
        let after: f64 = reg.pairs.iter().map(|&(g, _)| aligned[g].confidence).sum();
        assert_relative_eq!(before, after, epsilon = 1e-9);
    }

    fn two_node_state(d_now: f64, d_hist: f64) -> (DeformationGraph, HistoricalDistance) {
        let mut g = DeformationGraph::new(4, 2);
        let a = g.add_node(Vector3::zeros(), 0.05);
        let b = g.add_node(Vector3::new(d_now, 0.0, 0.0), 0.05);
        let mut dh = HistoricalDistance::new();
        dh.add_node(a, |_| 0.0);
        dh.add_node(b, |_| d_hist);
        (g, dh)
    }

    #[test]
    fn compression_definition_cases() {
        let cfg = UpdateConfig { gamma_upper: 0.2, gamma_lower: 0.05, ..Default::default() };
        // d_h = 0.3, d = 0.03: both flagged.
        let (g, dh) = two_node_state(0.03, 0.3);
        let set = detect_compressed(&g, &dh, &cfg);
        assert_eq!(set.len(), 2);
        // d = 0.10 >= gamma_lower: not flagged.
        let (g, dh) = two_node_state(0.10, 0.3);
        assert!(detect_compressed(&g, &dh, &cfg).is_empty());
        // Never separated: not flagged no matter how close.
        let (g, dh) = two_node_state(0.01, 0.15);
        assert!(detect_compressed(&g, &dh, &cfg).is_empty());
    }

    #[test]
    fn new_node_dh_seed_uses_triangle_bound() {
        // d_h(g_i, g_j) = 1.0, d(g_i, g_k) = 0.1, d(g_j, g_k) = 0.2
        // -> d_h(g_k, g_j) = max(1.0 - 0.1, 0.2) = 0.9.
        let mut g = DeformationGraph::new(4, 2);
        let gi = g.add_node(Vector3::zeros(), 0.05);
        let gj = g.add_node(Vector3::new(0.0, 0.2, 0.0), 0.05);
        let mut dh = HistoricalDistance::new();
        dh.add_node(gi, |_| 0.0);
        dh.add_node(gj, |_| 1.0);
        // Candidate 0.1 from g_i and 0.2 from g_j (g_i is nearest):
        // x^2 + y^2 = 0.01 and x^2 + (y - 0.2)^2 = 0.04 -> y = 0.025.
        let yy: f64 = (0.01 - 0.04 + 0.2 * 0.2) / (2.0 * 0.2);
        let xx = (0.01 - yy * yy).sqrt();
        let p = Vector3::new(xx, yy, 0.0);
        assert_relative_eq!((p - Vector3::zeros()).norm(), 0.1, epsilon = 1e-12);
        assert_relative_eq!((p - Vector3::new(0.0, 0.2, 0.0)).norm(), 0.2, epsilon = 1e-12);

        let cfg = UpdateConfig { gamma_nn: 0.15, r_sample: 0.05, ..Default::default() };
        let c = cam();
        let m = frame_of(vec![msurfel([p.x, p.y, p.z])], &c, 1);
        let maps = vec![IndexMap::render(&[], &c)];
        let out = append_measurement(
            &[0],
            &m,
            &mut g,
            &mut dh,
            &BTreeSet::new(),
            &maps,
            &[c],
            &cfg,
        )
        .unwrap();
        assert_eq!(out.new_nodes.len(), 1);
        let gk = out.new_nodes[0];
        assert_relative_eq!(dh.get(gk, gj), 0.9, epsilon = 1e-9);
        assert_relative_eq!(dh.get(gk, gi), 0.1, epsilon = 1e-9);
    }

    #[test]
    fn append_rejects_far_candidates_and_compressed_supports() {
        let cfg = UpdateConfig::default();
        let c = cam();
        let mut g = DeformationGraph::new(4, 2);
        let n0 = g.add_node(Vector3::zeros(), 0.05);
        let mut dh = HistoricalDistance::new();
        dh.add_node(n0, |_| 0.0);
        let maps = vec![IndexMap::render(&[], &c)];

        // Candidate 2 gamma_nn away: rejected by (1).
        let m = frame_of(vec![msurfel([2.0 * cfg.gamma_nn, 0.0, 0.0])], &c, 1);
        let out = append_measurement(
            &[0],
            &m,
            &mut g,
            &mut dh,
            &BTreeSet::new(),
            &maps,
            &[c.clone()],
            &cfg,
        )
        .unwrap();
        assert!(out.appended.is_empty());
        assert_eq!(out.rejected_far_from_graph, 1);

        // Candidate near a compressed node: rejected by (2).
        let compressed: BTreeSet<NodeId> = [n0].into();
        let m = frame_of(vec![msurfel([0.01, 0.0, 0.0])], &c, 1);
        let out = append_measurement(
            &[0],
            &m,
            &mut g,
            &mut dh,
            &compressed,
            &maps,
            &[c],
            &cfg,
        )
        .unwrap();
        assert!(out.appended.is_empty());
        assert_eq!(out.rejected_compressed_support, 1);
        assert_eq!(out.appended_with_compressed_support, 0);
    }

    #[test]
    fn append_on_empty_graph_is_an_error() {
        let cfg = UpdateConfig::default();
        let c = cam();
        let mut g = DeformationGraph::new(4, 2);
        let mut dh = HistoricalDistance::new();
        let m = frame_of(vec![msurfel([0.0, 0.0, 1.0])], &c, 1);
        let maps = vec![IndexMap::render(&[], &c)];
        let err = append_measurement(
            &[0],
            &m,
            &mut g,
            &mut dh,
            &BTreeSet::new(),
            &maps,
            &[c],
            &cfg,
        )
        .unwrap_err();
        assert_eq!(err, UpdateError::EmptyGraph);
    }

    #[test]
    fn matched_surfels_are_never_removed_and_free_space_violators_are() {
        let c = cam();
        let cfg = UpdateConfig::default();
        let mut surfels = vec![
            surfel([0.0, 0.0, 0.9], 0),  // 10 cm in front of measured surface
            surfel([0.0, 0.0, 1.15], 0), // behind the surface: occluded, kept
        ];
        surfels[1].timestamp = 5;
        let mut depths = DepthMap::invalid(c.width, c.height);
        for i in 0..depths.depth.len() {
            depths.depth[i] = 1.0;
            depths.normal[i] = Vector3::new(0.0, 0.0, -1.0);
        }
        let m = MeasurementFrame { surfels: vec![], depths: vec![depths], frame: 5 };
        // Only index 0 and 1 unmatched; a matched surfel is not a candidate
        // by construction of the argument list.
        let out = remove_surfels(&surfels, &[0, 1], &m, &[c], 5, &cfg);
        assert_eq!(out.removed, vec![0]);
        assert_eq!(out.removed_free_space, 1);
        assert_eq!(out.counts.get(&NodeId(0)), Some(&1));
    }

    #[test]
    fn stale_unstable_surfels_are_removed() {
        let c = cam();
        let cfg = UpdateConfig::default();
        let mut s = surfel([0.0, 0.0, 1.0], 3);
        s.timestamp = 0;
        s.confidence = 1.0;
        let m = MeasurementFrame {
            surfels: vec![],
            depths: vec![DepthMap::invalid(c.width, c.height)],
            frame: 40,
        };
        let out = remove_surfels(&[s], &[0], &m, &[c], 40, &cfg);
        assert_eq!(out.removed, vec![0]);
        assert_eq!(out.removed_unstable, 1);
    }

    #[test]
    fn overlapped_low_confidence_surfel_is_removed() {
        let c = cam();
        let cfg = UpdateConfig::default();
        let mut a = surfel([0.0, 0.0, 1.0], 0);
        a.confidence = 1.0;
        let mut b = surfel([0.001, 0.0, 1.0], 0);
        b.confidence = 5.0;
        let m = MeasurementFrame {
            surfels: vec![],
            depths: vec![DepthMap::invalid(c.width, c.height)],
            frame: 1,
        };
        let out = remove_surfels(&[a, b], &[0], &m, &[c], 1, &cfg);
        assert_eq!(out.removed, vec![0]);
        assert_eq!(out.removed_overlap, 1);
    }

    #[test]
    fn node_removal_takes_its_surfels_and_rebuilds_knn() {
        let cfg = UpdateConfig { gamma_remove: 2, ..Default::default() };
        let mut g = DeformationGraph::new(2, 2);
        let ids: Vec<NodeId> = (0..4)
            .map(|i| g.add_node(Vector3::new(i as f64 * 0.05, 0.0, 0.0), 0.05))
            .collect();
        let mut dh = HistoricalDistance::new();
        for (i, &id) in ids.iter().enumerate() {
            let pos_i = i as f64 * 0.05;
            dh.add_node(id, |other| {
                let j = other.0 as f64 * 0.05;
                (pos_i - j).abs()
            });
        }
        rebuild_knn_under_dh(&mut g, &dh);
        let mut surfels: Vec<Surfel> = (0..50).map(|k| surfel([0.05, k as f64 * 0.001, 0.0], 1)).collect();
        surfels.push(surfel([0.0, 0.0, 0.0], 0));

        // No counts: nothing happens.
        let removed = remove_nodes(&mut g, &mut dh, &mut surfels, &BTreeMap::new(), &cfg);
        assert!(removed.is_empty());
        assert_eq!(g.len(), 4);

        // Node 1 over threshold: node and its 50 surfels go.
        let mut counts = BTreeMap::new();
        counts.insert(ids[1], 3u32);
        let removed = remove_nodes(&mut g, &mut dh, &mut surfels, &counts, &cfg);
        assert_eq!(removed, vec![ids[1]]);
        assert_eq!(g.len(), 3);
        assert_eq!(surfels.len(), 1);
        assert!(!dh.contains(ids[1]));
        for n in g.nodes() {
            assert!(!g.neighbors(n.id).contains(&ids[1]));
            assert_eq!(g.neighbors(n.id).len(), 2.min(g.len() - 1));
        }
    }

    #[test]
    fn historical_distance_update_cases() {
        let mut g = DeformationGraph::new(2, 2);
        let a = g.add_node(Vector3::zeros(), 0.05);
        let b = g.add_node(Vector3::new(0.5, 0.0, 0.0), 0.05);
        let mut dh = HistoricalDistance::new();
        dh.add_node(a, |_| 0.0);
        dh.add_node(b, |_| 0.5);

        // Moved apart 0.5 -> 0.8.
        g.node_mut(b).unwrap().position = Vector3::new(0.8, 0.0, 0.0);
        update_historical_distance(&mut dh, &g);
        assert_relative_eq!(dh.get(a, b), 0.8, epsilon = 1e-12);

        // Moved back together: stays at the max.
        g.node_mut(b).unwrap().position = Vector3::new(0.5, 0.0, 0.0);
        update_historical_distance(&mut dh, &g);
        assert_relative_eq!(dh.get(a, b), 0.8, epsilon = 1e-12);

        // Static graph: unchanged.
        update_historical_distance(&mut dh, &g);
        assert_relative_eq!(dh.get(a, b), 0.8, epsilon = 1e-12);
    }

    #[test]
    fn orphan_nodes_are_garbage_collected() {
        let mut g = DeformationGraph::new(2, 2);
        let a = g.add_node(Vector3::zeros(), 0.05);
        let b = g.add_node(Vector3::new(0.1, 0.0, 0.0), 0.05);
        let mut dh = HistoricalDistance::new();
        dh.add_node(a, |_| 0.0);
        dh.add_node(b, |_| 0.1);
        let surfels = vec![surfel([0.0, 0.0, 0.0], a.0)];
        let orphans = garbage_collect_orphan_nodes(&mut g, &mut dh, &surfels);
        assert_eq!(orphans, vec![b]);
        assert_eq!(g.len(), 1);
        assert_eq!(dh.len(), 1);
    }
}
