use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("degenerate attention row {row} (every position masked)")]
    DegenerateRow { row: usize },

    #[error("backward called on a non-scalar tensor of shape {0:?}")]
    NonScalar(Vec<usize>),

    #[error("invalid dependency tree: {0}")]
    InvalidTree(String),

    #[error("line {line}: {msg}")]
    Conllu { line: usize, msg: String },

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("sequence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },

    #[error("length mismatch: {0}")]
    Alignment(String),

    #[error("non-finite loss component: {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    /// Short machine-readable category, printed by the command-line tool on failure.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::DegenerateRow { .. } | Error::NonScalar(_) => "numeric",
            Error::InvalidTree(_) => "tree",
            Error::Conllu { .. } => "conllu",
            Error::TokenOutOfRange { .. } | Error::TooLong { .. } => "input",
            Error::Alignment(_) => "alignment",
            Error::NonFinite(_) => "non_finite",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::Empty(_) => "empty",
            Error::Io(_) => "io",
            Error::Json(_) => "format",
        }
    }
}
