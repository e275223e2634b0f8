use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::graph::NodeId;

/// Surface element: an oriented disk with color, confidence and the graph
/// node that routes its topology membership.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Surfel {
    /// Position in meters.
    pub position: Vector3<f64>,
    /// Unit normal.
    pub normal: Vector3<f64>,
    /// RGB in [0,1].
    pub color: [f32; 3],
    /// Disk radius in meters, > 0.
    pub radius: f64,
    /// Accumulated observation weight, >= 0.
    pub confidence: f64,
    /// Frame index of the last observation.
    pub timestamp: u32,
    /// Support node: nearest graph node when this surfel joined the geometry.
    pub support: NodeId,
}

impl Surfel {
    /// Validity of the local invariants (unit normal, positive radius,
    /// non-negative confidence). Support liveness is checked at scene level.
    pub fn is_well_formed(&self) -> bool {
        (self.normal.norm() - 1.0).abs() <= 1e-6 && self.radius > 0.0 && self.confidence >= 0.0
    }
}
