use std::path::PathBuf;

use thiserror::Error;

use crate::model::ModelParams;

/// Errors produced anywhere in the lab.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("mask selects no response steps")]
    EmptyResponse,

    #[error("token {token} out of vocabulary of size {vocab}")]
    Index { token: usize, vocab: usize },

    #[error("finite-difference oracle unusable: {0}")]
    OracleUnusable(String),

    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    Length { len: usize, max: usize },

    #[error("layout error: {0}")]
    Layout(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("position error: {0}")]
    Position(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("degenerate record: {0}")]
    Degenerate(String),

    /// `snapshot` holds the last finite parameters when they are known.
    #[error("training diverged: {message}")]
    Divergence {
        message: String,
        snapshot: Option<Box<ModelParams>>,
    },

    #[error("bias induction failed: {0}")]
    InductionFailure(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn divergence(message: String, snapshot: Option<&ModelParams>) -> Self {
        Error::Divergence {
            message,
            snapshot: snapshot.map(|p| Box::new(p.clone())),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
