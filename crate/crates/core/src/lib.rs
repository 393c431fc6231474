//! Training and evaluation engine for a multimodal graph recommender.
//!
//! Per-modality embeddings are propagated over the user-item graph and over
//! frozen item-item similarity graphs, aligned across modalities by moment
//! matching, regularized by feature masking and graph perturbation, and
//! trained jointly with BPR.
//!
//! The pipeline, in order: [`ingest`] builds splits and feature matrices,
//! [`graphs`] builds the propagation operators, [`model`] holds parameters
//! and the forward pass, [`ssl`] the auxiliary losses, [`train`] the
//! objective, its gradient and the optimizer, and [`eval`] the ranking
//! metrics.

pub mod error;
pub mod eval;
pub mod graphs;
pub mod ingest;
pub mod model;
pub mod rng;
pub mod sparse;
pub mod ssl;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
