use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid mesh resolution {0}: need n >= 2")]
    InvalidResolution(usize),

    #[error("unsupported dimension {0}: only 1 and 2 are supported")]
    UnsupportedDimension(usize),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("solver error: {0}")]
    Solver(String),

    #[error("optimization error: {0}")]
    Optimization(String),

    #[error("sweep aborted at step {step}: {reason}")]
    SweepAborted { step: usize, reason: String },
}

pub type Result<T> = std::result::Result<T, Error>;
