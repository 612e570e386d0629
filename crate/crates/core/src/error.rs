use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("out of range: {0}")]
    Range(String),
    #[error("{0}")]
    Guard(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("line {line}: malformed record: {message}")]
    Parse { line: usize, message: String },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("non-finite loss at step {step}: {detail}")]
    Divergence { step: usize, detail: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
