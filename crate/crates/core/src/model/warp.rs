//! Warp-field math: distance-weighted dual-quaternion blending of per-node
//! transforms, applied to surfels and to the graph nodes themselves.

use std::collections::HashMap;

use nalgebra::Vector3;
use thiserror::Error;

use crate::dq::{DqError, DualQuat};

use super::graph::{DeformationGraph, NodeId};
use super::surfel::Surfel;

#[derive(Debug, Error, PartialEq)]
pub enum WarpError {
    #[error(transparent)]
    Blend(#[from] DqError),
    #[error("surfel support node {0:?} is not in the graph")]
    DanglingSupport(NodeId),
    #[error("blend requested with no neighbors")]
    EmptyNeighbors,
    #[error("warp field does not cover node {0:?}")]
    MissingNode(NodeId),
}

/// Per-node unit dual quaternions plus the (position, influence radius)
/// pair mirrored from the graph; defines one frame step of deformation.
#[derive(Debug, Clone)]
pub struct WarpField {
    entries: Vec<WarpEntry>,
    index: HashMap<NodeId, usize>,
}

#[derive(Debug, Clone, Copy)]
pub struct WarpEntry {
    pub node: NodeId,
    pub position: Vector3<f64>,
    pub delta: f64,
    pub transform: DualQuat,
}

impl WarpField {
    /// Identity field over all live graph nodes.
    pub fn identity(graph: &DeformationGraph) -> Self {
        Self::from_transforms(graph, |_| DualQuat::IDENTITY)
    }

    pub fn from_transforms(
        graph: &DeformationGraph,
        mut transform_of: impl FnMut(NodeId) -> DualQuat,
    ) -> Self {
        let entries: Vec<WarpEntry> = graph
            .nodes()
            .iter()
            .map(|n| WarpEntry {
                node: n.id,
                position: n.position,
                delta: n.delta,
                transform: transform_of(n.id),
            })
            .collect();
        let index = entries.iter().enumerate().map(|(i, e)| (e.node, i)).collect();
        Self { entries, index }
    }

    pub fn entries(&self) -> &[WarpEntry] {
        &self.entries
    }

    pub fn entry(&self, id: NodeId) -> Option<&WarpEntry> {
        self.index.get(&id).map(|&i| &self.entries[i])
    }

    pub fn set_transform(&mut self, id: NodeId, q: DualQuat) {
        let i = self.index[&id];
        self.entries[i].transform = q;
    }

    pub fn covers(&self, graph: &DeformationGraph) -> bool {
        graph.len() == self.entries.len() && graph.nodes().iter().all(|n| self.index.contains_key(&n.id))
    }
}

/// Gaussian falloff weight of a node at distance `sq_dist` from the query.
pub fn influence_weight(sq_dist: f64, delta: f64) -> f64 {
    (-sq_dist / (2.0 * delta * delta)).exp()
}

/// Blend weights over a neighbor set, normalized to sum to one. When every
/// Gaussian weight underflows to zero the result is one-hot on the nearest
/// neighbor (ties broken by list order), so a blend always has support.
pub fn normalized_blend_weights(v: &Vector3<f64>, neighbors: &[(Vector3<f64>, f64)]) -> Vec<f64> {
    let raw: Vec<f64> = neighbors
        .iter()
        .map(|(p, delta)| influence_weight((v - p).norm_squared(), *delta))
        .collect();
    let total: f64 = raw.iter().sum();
    if total > 0.0 {
        return raw.iter().map(|w| w / total).collect();
    }
    let nearest = neighbors
        .iter()
        .enumerate()
        .min_by(|a, b| {
            let da = (v - a.1 .0).norm_squared();
            let db = (v - b.1 .0).norm_squared();
            da.total_cmp(&db).then(a.0.cmp(&b.0))
        })
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut w = vec![0.0; neighbors.len()];
    w[nearest] = 1.0;
    w
}

/// Index of the heaviest contributor; its transform fixes the hemisphere
/// every input is sign-aligned to before summation.
pub fn blend_reference_index(weights: &[f64]) -> usize {
    weights
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Blend neighbor transforms at a point: sign-align, weight with the
/// negative-exponent Gaussian, sum, renormalize. If every weight underflows
/// to zero the nearest neighbor's transform is returned unchanged.
pub fn blend_warp(
    v: &Vector3<f64>,
    neighbors: &[(Vector3<f64>, f64, DualQuat)],
) -> Result<DualQuat, WarpError> {
    if neighbors.is_empty() {
        return Err(WarpError::EmptyNeighbors);
    }
    let sites: Vec<(Vector3<f64>, f64)> = neighbors.iter().map(|(p, d, _)| (*p, *d)).collect();
    let weights = normalized_blend_weights(v, &sites);
    let reference = neighbors[blend_reference_index(&weights)].2;
    let mut sum = DualQuat::new(nalgebra::Quaternion::default(), nalgebra::Quaternion::default());
    for ((_, _, q), &w) in neighbors.iter().zip(&weights) {
        if w == 0.0 {
            continue;
        }
        let aligned = if reference.real_dot(q) < 0.0 { q.negated() } else { *q };
        sum = sum.add(&aligned.scaled(w));
    }
    Ok(sum.normalized()?)
}

/// Neighbor nodes of a surfel: the k' nearest (current Euclidean distance)
/// among the graph-neighbors of its support node plus the support itself,
/// so every returned node lives in the support's connected component.
pub fn surfel_neighbors(s: &Surfel, graph: &DeformationGraph) -> Result<Vec<NodeId>, WarpError> {
    if !graph.contains(s.support) {
        return Err(WarpError::DanglingSupport(s.support));
    }
    let mut candidates: Vec<NodeId> = Vec::with_capacity(graph.k + 1);
    candidates.push(s.support);
    candidates.extend_from_slice(graph.neighbors(s.support));
    candidates.sort_by(|a, b| {
        let da = (graph.node(*a).unwrap().position - s.position).norm_squared();
        let db = (graph.node(*b).unwrap().position - s.position).norm_squared();
        da.total_cmp(&db).then(a.cmp(b))
    });
    candidates.truncate(graph.k_prime);
    Ok(candidates)
}

/// Blended transform at a point given explicit neighbor node ids.
pub fn blend_at(
    v: &Vector3<f64>,
    neighbor_ids: &[NodeId],
    warp: &WarpField,
) -> Result<DualQuat, WarpError> {
    let mut local: Vec<(Vector3<f64>, f64, DualQuat)> = Vec::with_capacity(neighbor_ids.len());
    for id in neighbor_ids {
        let e = warp.entry(*id).ok_or(WarpError::MissingNode(*id))?;
        local.push((e.position, e.delta, e.transform));
    }
    blend_warp(v, &local)
}

/// Deform one surfel: position by the full blended rigid transform, normal
/// by its rotation part only; color, radius, confidence untouched.
pub fn warp_surfel(
    s: &Surfel,
    warp: &WarpField,
    graph: &DeformationGraph,
) -> Result<Surfel, WarpError> {
    let neighbors = surfel_neighbors(s, graph)?;
    let t = blend_at(&s.position, &neighbors, warp)?;
    Ok(Surfel {
        position: t.transform_point(&s.position),
        normal: t.transform_vector(&s.normal),
        ..*s
    })
}

/// Advance every node position by the blended transform of its own graph
/// neighbors, then reset node transforms to identity (the deformation is
/// consumed into positions). A node with no neighbors applies its own
/// transform.
pub fn warp_graph_nodes(graph: &DeformationGraph, warp: &WarpField) -> Result<DeformationGraph, WarpError> {
    if !warp.covers(graph) {
        let missing = graph
            .nodes()
            .iter()
            .find(|n| warp.entry(n.id).is_none())
            .map(|n| n.id)
            .unwrap_or(NodeId(u32::MAX));
        return Err(WarpError::MissingNode(missing));
    }
    let mut out = graph.clone();
    for node in out.nodes_mut() {
        let neighbors = graph.neighbors(node.id);
        let t = if neighbors.is_empty() {
            warp.entry(node.id).expect("coverage checked").transform
        } else {
            blend_at(&node.position, neighbors, warp)?
        };
        node.position = t.transform_point(&node.position);
        node.transform = DualQuat::IDENTITY;
    }
    Ok(out)
}
