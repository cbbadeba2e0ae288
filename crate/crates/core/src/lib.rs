//! Heterogeneous graph tree networks for semi-supervised node classification.
//!
//! The crate bundles everything needed to train and evaluate HetGTCN and
//! HetGTAN, plus the HetGCN and HetGAT baselines built on the same
//! three-stage architecture (node-type projection, edge-type-specific
//! propagation, target-specific aggregation):
//!
//! - [`tensor`]: a small dense reverse-mode autodiff tape with the sparse and
//!   segmented kernels the layers need.
//! - [`graph`]: typed graph schema, on-disk dataset format, adjacency
//!   normalization and synthetic graph generation.
//! - [`layers`]: projections, per-edge-type propagation rules and aggregators.
//! - [`model`]: full models, parameter initialization and checkpoints.
//! - [`training`]: loss, Adam, early stopping, F1 metrics and the repeated-run
//!   evaluation protocol.
//! - [`suite`]: the finite-difference gradient check over every op and model.

pub mod error;
pub mod graph;
pub mod layers;
pub mod model;
pub mod scalar;
pub mod suite;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use scalar::{Precision, Scalar};
