use std::path::PathBuf;

/// Errors raised anywhere in the pipeline.
#[derive(Debug, thiserror::Error)]
pub enum KgtError {
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("unknown {kind} `{name}` in {context}")]
    UnknownSymbol {
        kind: &'static str,
        name: String,
        context: String,
    },
    #[error("split `{0}` is empty")]
    EmptySplit(&'static str),
    #[error("graph is already inverse-augmented")]
    AlreadyAugmented,
    #[error("graph must be inverse-augmented first")]
    NotAugmented,
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    Dimension {
        what: String,
        expected: usize,
        got: usize,
    },
    #[error("bad feature file: {0}")]
    Format(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("embedding service failed on batch {batch}: {msg}")]
    Remote { batch: usize, msg: String },
    #[error("config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("conflicting settings: {0}")]
    Conflict(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl KgtError {
    /// True for failures caused by NaN/inf during training or inference.
    pub fn is_numeric(&self) -> bool {
        matches!(self, KgtError::NonFinite(_))
    }
}

pub type Result<T, E = KgtError> = std::result::Result<T, E>;
