use std::io;

use thiserror::Error;

/// Errors raised anywhere in the inversion pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),
    #[error("invalid medium: {0}")]
    InvalidMedium(String),
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("forward solve diverged at timestep {step}")]
    Divergence { step: usize },
    #[error("storage contract violated: {0}")]
    Storage(String),
    #[error("evaluation order violated: {0}")]
    Ordering(String),
    #[error("solver failed to converge: {0}")]
    Solver(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("linear algebra failure: {0}")]
    Linalg(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(Error::Shape { expected, got })
    }
}
