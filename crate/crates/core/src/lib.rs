//! Checkpoint merging and weight-space diagnostics.
//!
//! The crate is organised by subsystem:
//!
//! - [`tensor`]: single-file tensor archives, bf16/f32 conversion, [`Checkpoint`].
//! - [`merge`]: task vectors, DARE, and the average / task-arithmetic / Ties / SCE merges.
//! - [`diagnostics`]: changed-weight masks, Jaccard overlap, orthogonal random
//!   projection and the per-layer weight-shift report.
//! - [`divergence`]: Monte-Carlo forward KL over log-prob traces, KL matrices and
//!   policy neighborhoods.
//! - [`eval`]: Avg@K, gain vectors, gain consistency and Pearson correlation.
//!
//! With the default `parallel` feature, independent work items (tensors, model
//! pairs, matrix cells, row blocks) are spread over the rayon pool. Reductions
//! always run in a fixed order, so results do not depend on the worker count or
//! on whether the feature is enabled.

pub mod diagnostics;
pub mod divergence;
pub mod error;
pub mod eval;
pub mod exec;
pub mod merge;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Checkpoint, DType, Tensor};
