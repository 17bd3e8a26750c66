use std::io;

use thiserror::Error;

/// Errors raised by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("sample {id} has a zero-norm embedding")]
    ZeroNorm { id: u64 },

    #[error("group {group} has no samples in the evaluation set")]
    EmptyGroup { group: String },

    #[error("cluster {cluster} has no triage tag")]
    MissingTag { cluster: usize },

    #[error("oracle failed on sample {id}: {reason}")]
    Oracle { id: u64, reason: String },

    #[error("logistic regression did not converge (objective {objective})")]
    NotConverged { objective: f64 },

    #[error("retrain repeat {repeat} failed: {source}")]
    RepeatFailed {
        repeat: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },

    #[error("container format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
