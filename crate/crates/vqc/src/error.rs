//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by the autodiff tape.
#[derive(Debug, Error)]
pub enum AdError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("domain error: {0}")]
    Domain(String),
}

/// Errors raised by the geometry/channel pipeline.
#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("degenerate geometry: {0}")]
    Degenerate(String),
    #[error("distance must be positive, got {0}")]
    NonpositiveDistance(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("radio-map grid is empty: {0}")]
    EmptyGrid(String),
}

/// Top-level error for training, evaluation, checkpointing and the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for usage/config problems,
    /// 2 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Io(_) | Error::Json(_) | Error::Checkpoint(_) => 1,
            _ => 2,
        }
    }
}
