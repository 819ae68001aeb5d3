//! miniprune-core: desk-scale structured pruning for decoder language models.
//!
//! The crate covers the full pipeline: a small causal transformer with a
//! hand-derived backward pass, forward-only gradient estimation via paired
//! perturbations, sensitivity scoring, dependency-aware group removal,
//! low-rank adapter recovery, perplexity evaluation, and deterministic
//! checkpoint/plan serialization.

pub mod dataio;
pub mod error;
pub mod evalkit;
pub mod model;
pub mod optim;
pub mod pruner;
pub mod recovery;
pub mod rng;
pub mod scoring;
pub mod tensor;
pub mod train;
pub mod zo;

pub use error::{CoreError, Result};
