//! Sparse and debiased subnetwork search for a miniature two-stream
//! vision-language transformer.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod losses;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod sparsity;
pub mod train;

pub use error::{Error, Result};
