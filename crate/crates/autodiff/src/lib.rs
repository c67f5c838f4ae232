//! Small dense-tensor engine with reverse-mode differentiation.
//!
//! Everything is `f64` and row-major. A [`Graph`] records primitives as they
//! are applied; [`Graph::backward`] replays them in reverse.

mod error;
mod gemm;
mod gradcheck;
mod graph;
mod tensor;

pub use error::{AutodiffError, Result};
pub use gradcheck::{grad_check, GradCheck};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

/// Clamp applied inside every log of a probability.
pub const LOG_EPS: f64 = 1e-9;

/// Variance epsilon used by layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;
