//! Geometric state types shared by every pipeline stage.

pub mod graph;
pub mod surfel;
pub mod warp;

pub use graph::{DeformationGraph, GraphNode, HistoricalDistance, NodeId};
pub use surfel::Surfel;
pub use warp::{
    blend_at, blend_reference_index, blend_warp, influence_weight, normalized_blend_weights,
    surfel_neighbors, warp_graph_nodes, warp_surfel, WarpError, WarpField,
};

/// Full scene model at one frame boundary. Stages never mutate a state in
/// place; each frame produces a replacement snapshot.
#[derive(Debug, Clone)]
pub struct SceneState {
    pub surfels: Vec<Surfel>,
    pub graph: DeformationGraph,
    pub warp: WarpField,
    pub dh: HistoricalDistance,
    pub frame: u32,
}

impl SceneState {
    /// Referential integrity: every surfel's support node exists and the
    /// historical distance store tracks exactly the live nodes.
    pub fn check_integrity(&self) -> Result<(), String> {
        for (i, s) in self.surfels.iter().enumerate() {
            if !self.graph.contains(s.support) {
                return Err(format!("surfel {i} references dead node {:?}", s.support));
            }
        }
        if self.dh.len() != self.graph.len() {
            return Err(format!(
                "historical distance tracks {} nodes, graph has {}",
                self.dh.len(),
                self.graph.len()
            ));
        }
        for n in self.graph.nodes() {
            if !self.dh.contains(n.id) {
                return Err(format!("node {:?} untracked in historical distance", n.id));
            }
        }
        Ok(())
    }
}
