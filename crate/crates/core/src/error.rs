use thiserror::Error;

use crate::engine::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("no expert covers sigma = {sigma}")]
    Routing { sigma: f64 },
    #[error("sampler state became non-finite at step {step}")]
    NonFiniteState { step: usize },
    #[error("non-finite loss at step {step} (mean sigma {mean_sigma})")]
    NonFiniteLoss { step: usize, mean_sigma: f64 },
    #[error("degenerate mixture: every responsibility underflowed at sigma = {sigma}")]
    DegenerateMixture { sigma: f64 },
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
