use std::path::PathBuf;

/// Errors produced by the clause recommendation engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: malformed record: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}: duplicate contract id {id:?}")]
    DuplicateContract { line: usize, id: String },

    #[error("insufficient contracts for target {target:?}: need at least {needed} {class} contracts, found {found}")]
    InsufficientContracts {
        target: String,
        class: &'static str,
        needed: usize,
        found: usize,
    },

    #[error("unknown clause type {0:?}")]
    UnknownClauseType(String),

    #[error("unknown contract {0:?}")]
    UnknownContract(String),

    #[error("contract {0:?} has no encodable clauses")]
    EmptyContract(String),

    #[error("zero vector has no direction")]
    ZeroVector,

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("backward called on a detached graph: {0}")]
    DetachedGraph(&'static str),

    #[error("encoder request timed out: {0}")]
    EncoderTimeout(String),

    #[error("encoder protocol mismatch: {0}")]
    EncoderProtocol(String),

    #[error("encoder transport failure: {0}")]
    EncoderTransport(String),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("artifact error: {0}")]
    Artifact(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
