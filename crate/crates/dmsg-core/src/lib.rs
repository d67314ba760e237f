//! Core library for class-incremental node classification on growing graphs.
//!
//! The pieces fit together in one pipeline: [`graph`] loads or synthesizes a
//! growing graph and slices it into cumulative task snapshots, [`numerics`]
//! provides the dense/sparse tensor types and the reverse-mode tape everything
//! trains on, [`model`] is the two-layer graph-convolutional encoder with an
//! expandable classifier head, [`buffer`] selects diversified memory buffers
//! from each task's nodes, [`replay`] generates variational embeddings from
//! those buffers and scores them with the adversarial and structure-aware
//! replay losses, and [`trainer`] runs whole task sequences and reports
//! average-accuracy / average-forgetting metrics.

pub mod buffer;
pub mod graph;
pub mod model;
pub mod numerics;
pub mod replay;
pub mod seeds;
pub mod trainer;
