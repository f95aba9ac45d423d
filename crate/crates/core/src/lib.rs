//! ConvDySAT: dynamic-graph node embeddings via structural self-attention and
//! convolution-enriched temporal self-attention.
//!
//! The crate is layered:
//! - [`tensor`] and [`tape`] hold the dense-tensor reverse-mode engine,
//! - [`graph`] the snapshot data model and ingestion,
//! - [`sampling`] random walks, co-occurrence pairs, and negative tables,
//! - [`layers`] the structural and temporal attention blocks,
//! - [`model`] the full forward pass and the binary cross-entropy objective,
//! - [`training`] the Adam loop, checkpoints, and metrics,
//! - [`evaluation`] link-prediction splits, logistic scoring, and ROC-AUC,
//! - [`synth`] deterministic synthetic datasets for calibration and tests.

pub mod checkpoint;
pub mod evaluation;
pub mod gradcheck;
pub mod graph;
pub mod layers;
pub mod model;
pub mod sampling;
pub mod seeds;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use tape::{ComputationTape, TensorError, TensorId};
pub use tensor::Tensor;
