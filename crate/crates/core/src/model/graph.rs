//! Deformation graph: sparse node set whose blended per-node transforms
//! define the scene's non-rigid warp, with neighbor lists kept under the
//! historical maximum distance so once-separated parts never reconnect.

use std::collections::HashMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::dq::DualQuat;

/// Stable node identifier. Never reused within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub u32);

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub id: NodeId,
    /// Position in meters.
    pub position: Vector3<f64>,
    /// Influence radius delta in meters, > 0.
    pub delta: f64,
    /// Current transform; identity between frames (deformation is consumed
    /// into positions at the end of each alignment step).
    pub transform: DualQuat,
    /// Supported surfels removed this frame; reset every frame.
    pub removal_count: u32,
}

#[derive(Debug, Clone)]
pub struct DeformationGraph {
    nodes: Vec<GraphNode>,
    index: HashMap<NodeId, usize>,
    /// Per-node neighbor ids ordered by ascending historical max distance,
    /// aligned with `nodes`.
    knn: Vec<Vec<NodeId>>,
    /// Neighbor count for nodes.
    pub k: usize,
    /// Neighbor count for surfels, k' <= k.
    pub k_prime: usize,
    next_id: u32,
}

impl DeformationGraph {
    pub fn new(k: usize, k_prime: usize) -> Self {
        assert!(k_prime <= k, "k_prime must not exceed k");
        Self {
            nodes: Vec::new(),
            index: HashMap::new(),
            knn: Vec::new(),
            k,
            k_prime,
            next_id: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [GraphNode] {
        &mut self.nodes
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.index.contains_key(&id)
    }

    pub fn node(&self, id: NodeId) -> Option<&GraphNode> {
        self.index.get(&id).map(|&i| &self.nodes[i])
    }

    pub fn node_mut(&mut self, id: NodeId) -> Option<&mut GraphNode> {
        self.index.get(&id).copied().map(move |i| &mut self.nodes[i])
    }

    pub fn slot_of(&self, id: NodeId) -> Option<usize> {
        self.index.get(&id).copied()
    }

    /// Neighbor list of `id`, ordered by ascending historical max distance.
    /// Empty until the first `rebuild_knn`.
    pub fn neighbors(&self, id: NodeId) -> &[NodeId] {
        match self.index.get(&id) {
            Some(&i) => &self.knn[i],
            None => &[],
        }
    }

    pub fn add_node(&mut self, position: Vector3<f64>, delta: f64) -> NodeId {
        assert!(delta > 0.0, "influence radius must be positive");
        let id = NodeId(self.next_id);
        self.next_id += 1;
        self.index.insert(id, self.nodes.len());
        self.nodes.push(GraphNode {
            id,
            position,
            delta,
            transform: DualQuat::IDENTITY,
            removal_count: 0,
        });
        self.knn.push(Vec::new());
        id
    }

    /// Remove a set of nodes. Neighbor lists of survivors become stale and
    /// must be rebuilt by the caller.
    pub fn remove_nodes(&mut self, ids: &[NodeId]) {
        if ids.is_empty() {
            return;
        }
        let doomed: std::collections::HashSet<NodeId> = ids.iter().copied().collect();
        let mut kept_knn = Vec::with_capacity(self.knn.len());
        let mut kept_nodes = Vec::with_capacity(self.nodes.len());
        for (node, knn) in self.nodes.drain(..).zip(self.knn.drain(..)) {
            if !doomed.contains(&node.id) {
                kept_nodes.push(node);
                kept_knn.push(knn);
            }
        }
        self.nodes = kept_nodes;
        self.knn = kept_knn;
        self.index.clear();
        for (i, node) in self.nodes.iter().enumerate() {
            self.index.insert(node.id, i);
        }
    }

    /// Recompute every node's k-nearest-neighbor list under the given
    /// pairwise metric (ties broken by node id for determinism).
    pub fn rebuild_knn(&mut self, metric: impl Fn(NodeId, NodeId) -> f64 + Sync) {
        use rayon::prelude::*;
        let nodes = &self.nodes;
        let k = self.k;
        self.knn = nodes
            .par_iter()
            .map(|a| {
                let mut cands: Vec<(f64, NodeId)> = nodes
                    .iter()
                    .filter(|b| b.id != a.id)
                    .map(|b| (metric(a.id, b.id), b.id))
                    .collect();
                cands.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
                cands.truncate(k);
                cands.into_iter().map(|(_, id)| id).collect()
            })
            .collect();
    }

    /// Reset all node transforms to identity and clear removal counters.
    pub fn reset_transforms(&mut self) {
        for n in &mut self.nodes {
            n.transform = DualQuat::IDENTITY;
        }
    }

    pub fn reset_removal_counts(&mut self) {
        for n in &mut self.nodes {
            n.removal_count = 0;
        }
    }

    /// Nearest node to a point by current Euclidean distance (brute force;
    /// use `crate::grid` for bulk queries). Ties broken by node id.
    pub fn nearest_node(&self, p: &Vector3<f64>) -> Option<(NodeId, f64)> {
        self.nodes
            .iter()
            .map(|n| ((n.position - p).norm(), n.id))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(d, id)| (id, d))
    }
}

/// Symmetric per-node-pair running maximum of Euclidean distance; the
/// topology signal. Stored as a packed strict lower triangle over slots.
#[derive(Debug, Clone, Default)]
pub struct HistoricalDistance {
    ids: Vec<NodeId>,
    slot: HashMap<NodeId, usize>,
    /// Packed entries: pair (a, b) with slot(a) < slot(b) lives at
    /// `tri(slot(b)) + slot(a)` where `tri(n) = n*(n-1)/2`.
    d: Vec<f64>,
}

fn tri(n: usize) -> usize {
    n * (n - 1) / 2
}

impl HistoricalDistance {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[NodeId] {
        &self.ids
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.slot.contains_key(&id)
    }

    fn pack(&self, a: NodeId, b: NodeId) -> Option<usize> {
        let &sa = self.slot.get(&a)?;
        let &sb = self.slot.get(&b)?;
        match sa.cmp(&sb) {
            std::cmp::Ordering::Less => Some(tri(sb) + sa),
            std::cmp::Ordering::Greater => Some(tri(sa) + sb),
            std::cmp::Ordering::Equal => None,
        }
    }

    /// d_h(a, b); 0 for a == b. Panics if either id is untracked.
    pub fn get(&self, a: NodeId, b: NodeId) -> f64 {
        if a == b {
            return 0.0;
        }
        let idx = self
            .pack(a, b)
            .expect("historical distance queried for untracked node pair");
        self.d[idx]
    }

    pub fn set(&mut self, a: NodeId, b: NodeId, value: f64) {
        if a == b {
            return;
        }
        let idx = self
            .pack(a, b)
            .expect("historical distance set for untracked node pair");
        self.d[idx] = value;
    }

    /// Grow d_h(a, b) to at least `dist` (the max rule).
    pub fn observe(&mut self, a: NodeId, b: NodeId, dist: f64) {
        if a == b {
            return;
        }
        let idx = self
            .pack(a, b)
            .expect("historical distance observed for untracked node pair");
        if dist > self.d[idx] {
            self.d[idx] = dist;
        }
    }

    /// Track a new node, initializing its pair entries from `init`.
    pub fn add_node(&mut self, id: NodeId, mut init: impl FnMut(NodeId) -> f64) {
        assert!(!self.slot.contains_key(&id), "node already tracked");
        let values: Vec<f64> = self.ids.iter().map(|&other| init(other)).collect();
        self.slot.insert(id, self.ids.len());
        self.ids.push(id);
        self.d.extend(values);
    }

    /// Drop rows/columns of removed nodes.
    pub fn remove_nodes(&mut self, ids: &[NodeId]) {
        if ids.is_empty() {
            return;
        }
        let doomed: std::collections::HashSet<NodeId> = ids.iter().copied().collect();
        let kept: Vec<NodeId> = self.ids.iter().copied().filter(|i| !doomed.contains(i)).collect();
        let mut d = Vec::with_capacity(tri(kept.len()).max(1));
        for (bi, &b) in kept.iter().enumerate() {
            for &a in &kept[..bi] {
                let idx = self.pack(a, b).expect("kept pair must exist");
                d.push(self.d[idx]);
            }
        }
        self.ids = kept;
        self.slot = self.ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        self.d = d;
    }

    /// Apply the max rule against current node positions for every pair.
    pub fn observe_positions(&mut self, graph: &DeformationGraph) {
        let pos: Vec<Vector3<f64>> = self
            .ids
            .iter()
            .map(|id| {
                graph
                    .node(*id)
                    .expect("historical distance tracks a node missing from the graph")
                    .position
            })
            .collect();
        for sb in 1..self.ids.len() {
            let base = tri(sb);
            for sa in 0..sb {
                let dist = (pos[sa] - pos[sb]).norm();
                let idx = base + sa;
                if dist > self.d[idx] {
                    self.d[idx] = dist;
                }
            }
        }
    }

    /// Visit every tracked unordered pair.
    pub fn for_each_pair(&self, mut f: impl FnMut(NodeId, NodeId, f64)) {
        for sb in 1..self.ids.len() {
            let base = tri(sb);
            for sa in 0..sb {
                f(self.ids[sa], self.ids[sb], self.d[base + sa]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_with(positions: &[[f64; 3]]) -> DeformationGraph {
        let mut g = DeformationGraph::new(8, 4);
        for p in positions {
            g.add_node(Vector3::new(p[0], p[1], p[2]), 0.05);
        }
        g
    }

    #[test]
    fn knn_lists_have_expected_cardinality_and_no_self_edges() {
        let g0 = graph_with(&[[0.0; 3], [0.1, 0.0, 0.0], [0.2, 0.0, 0.0]]);
        let mut g = g0.clone();
        let pos: HashMap<NodeId, Vector3<f64>> =
            g.nodes().iter().map(|n| (n.id, n.position)).collect();
        g.rebuild_knn(|a, b| (pos[&a] - pos[&b]).norm());
        for n in g.nodes() {
            let nb = g.neighbors(n.id);
            assert_eq!(nb.len(), (g.len() - 1).min(g.k));
            assert!(!nb.contains(&n.id));
        }
    }

    #[test]
    fn remove_nodes_keeps_index_consistent() {
        let mut g = graph_with(&[[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let victim = g.nodes()[1].id;
        g.remove_nodes(&[victim]);
        assert_eq!(g.len(), 2);
        assert!(!g.contains(victim));
        for (i, n) in g.nodes().iter().enumerate() {
            assert_eq!(g.slot_of(n.id), Some(i));
        }
    }

    #[test]
    fn historical_distance_is_symmetric_and_zero_on_diagonal() {
        let mut dh = HistoricalDistance::new();
        dh.add_node(NodeId(0), |_| 0.0);
        dh.add_node(NodeId(1), |_| 0.4);
        assert_eq!(dh.get(NodeId(0), NodeId(1)), dh.get(NodeId(1), NodeId(0)));
        assert_eq!(dh.get(NodeId(1), NodeId(1)), 0.0);
    }

    #[test]
    fn observe_only_grows() {
        let mut dh = HistoricalDistance::new();
        dh.add_node(NodeId(0), |_| 0.0);
        dh.add_node(NodeId(1), |_| 0.8);
        dh.observe(NodeId(0), NodeId(1), 0.5);
        assert_eq!(dh.get(NodeId(0), NodeId(1)), 0.8);
        dh.observe(NodeId(0), NodeId(1), 0.9);
        assert_eq!(dh.get(NodeId(0), NodeId(1)), 0.9);
    }

    #[test]
    fn remove_nodes_preserves_remaining_pairs() {
        let mut dh = HistoricalDistance::new();
        dh.add_node(NodeId(0), |_| 0.0);
        dh.add_node(NodeId(1), |_| 0.1);
        dh.add_node(NodeId(2), |other| if other == NodeId(0) { 0.2 } else { 0.3 });
        dh.remove_nodes(&[NodeId(1)]);
        assert_eq!(dh.len(), 2);
        assert_eq!(dh.get(NodeId(0), NodeId(2)), 0.2);
    }
}
