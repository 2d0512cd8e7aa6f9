//! Automatic partitioning of annotated training graphs into pipeline stages.
//!
//! The planner runs in three phases: atomic subcomponents ([`atomic`]),
//! balanced convex blocks ([`blocks`]) and stages with per-stage replica
//! counts ([`stages`]). [`sim`] replays a plan as a synchronous pipeline.

pub mod atomic;
pub mod blocks;
pub mod cluster;
pub mod cost;
pub mod graph;
pub mod models;
pub mod sim;
pub mod stages;

pub use cluster::ClusterSpec;
pub use cost::{CostModel, CostModelConfig, CostRecord};

pub use graph::{NodeId, TaskGraph};
