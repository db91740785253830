use std::path::PathBuf;

/// Errors produced anywhere in the routing engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("malformed model id {0:?}: expected `owner/repo_id`")]
    MalformedModelId(String),

    #[error("invalid model record {id}: {reason}")]
    InvalidRecord { id: String, reason: String },

    #[error("model {id} is already registered with different metadata ({field})")]
    ConflictingRecord { id: String, field: &'static str },

    #[error("unknown model {0}")]
    UnknownModel(String),

    #[error("model index {index} out of range for {len} registered models")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("degenerate query: projected query embedding has zero norm")]
    DegenerateQuery,

    #[error("degenerate embedding: row {0} has zero norm")]
    DegenerateEmbedding(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("non-finite gradient in {0} parameters")]
    NonFiniteGradient(&'static str),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("cannot select {k} points from {available} candidates")]
    TooManyPoints { k: usize, available: usize },

    #[error("featurizer produced no tokens for {0:?}")]
    EmptyInstruction(String),

    #[error("model {0} has no card features")]
    MissingCardFeatures(String),

    #[error("{path}:{line}: {message}")]
    Schema {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("unknown strategy {name:?}; valid strategies: {valid}")]
    UnknownStrategy { name: String, valid: String },

    #[error("{}: {cause}", path.display())]
    Io { path: PathBuf, cause: std::io::Error },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            cause: source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
