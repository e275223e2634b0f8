//! Simultaneous tracking, reconstruction and topological segmentation of
//! every object in a dynamic multi-view depth scene, with no object priors.
//!
//! The scene model is a surfel set (the skin) over a sparse deformation
//! graph (the skeleton). Per frame: synthetic multi-view depth is fused
//! into a measurement surfel set, the model is non-rigidly aligned to it,
//! geometry and graph are reconciled (fuse / append / remove), and the graph's
//! connected components under the historical maximum distance split the
//! scene into per-object models.

pub mod align;
pub mod camera;
pub mod dq;
pub mod grid;
pub mod measure;
pub mod model;
pub mod scene;
pub mod segment;
pub mod update;

pub use dq::{DqError, DualQuat};
pub use model::{
    DeformationGraph, GraphNode, HistoricalDistance, NodeId, SceneState, Surfel, WarpError,
    WarpField,
};
