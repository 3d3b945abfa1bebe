use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error("format error: {0}")]
    Format(String),

    #[error("corrupt archive: {0}")]
    Corrupt(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Divergence {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("unknown post id `{0}`")]
    UnknownId(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
