//! Cascading-failure prediction on interdependent urban infrastructure networks.
//!
//! The crate covers the whole numeric stack: the heterogeneous graph model,
//! a synthetic network generator, ground-truth cascade oracles, a small
//! reverse-mode autodiff engine, graph neural layers, the three pre-training
//! tasks, the dual-encoder RGCN predictor and the evaluation metrics.

pub mod autodiff;
pub mod cascade;
pub mod error;
pub mod gnn;
pub mod graph;
pub mod metrics;
pub mod model;
pub mod netgen;
pub mod pretrain;
pub mod rng;

pub use error::{Error, Result};
pub use graph::{Edge, FailedSet, HeteroGraph, LayerKind, NodeRecord, NodeState, RelationKind};
