use thiserror::Error;
use tickets_autodiff::AutodiffError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("mask for `{name}` has shape {mask:?} but the weight is {weight:?}")]
    MaskShape {
        name: String,
        mask: Vec<usize>,
        weight: Vec<usize>,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("infeasible sparsity {value} (must lie in [0, 1])")]
    Infeasible { value: f64 },
    #[error("invalid sparsity config: {0}")]
    InvalidSparsity(String),
    #[error("alpha must be >= 1, got {0}")]
    InvalidAlpha(f64),
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthSpec(String),
    #[error("non-finite loss {loss} at step {step} (batch {batch})")]
    NonFiniteLoss { loss: f64, step: usize, batch: usize },
    #[error("sparsity audit failed: {0}")]
    AuditFailed(String),
    #[error("invalid experiment: {0}")]
    InvalidExperiment(String),
    #[error("split `{0}` is empty")]
    EmptySplit(String),
    #[error("inconsistent records: {0}")]
    InconsistentRecords(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
