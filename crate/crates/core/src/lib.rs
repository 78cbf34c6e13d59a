//! Channel pruning for batch-normalized CNNs.
//!
//! Training drives batch-norm scale parameters γ to exact zeros with ISTA
//! (soft-thresholded gradient steps with a per-layer penalty ρ·λ^l). A channel
//! with γ = 0 emits a constant, which is then folded into the biases or moving
//! means of the layers that read it, leaving a strictly smaller network.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod graph;
pub mod ops;
pub mod presets;
pub mod prune;
pub mod sparsify;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{DType, Tensor};
