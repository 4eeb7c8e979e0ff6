//! Deep metric learning with multi-level distance regularization.
//!
//! Pairwise embedding distances are standardized with running statistics and
//! pulled toward the nearest of a small set of learnable levels, alongside a
//! conventional metric-learning loss (triplet, contrastive or margin). The
//! crate carries its own reverse-mode differentiation, a small MLP embedder,
//! batch samplers, retrieval evaluation and an experiment runner.

pub mod data;
pub mod embedder;
pub mod error;
pub mod evaluation;
pub mod experiment;
pub mod losses;
pub mod mdr;
pub mod numerics;
pub mod sampling;

pub use error::{MdrError, Result};
