//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("dtype mismatch: expected {expected}, got {actual}")]
    DTypeMismatch { expected: String, actual: String },

    #[error("bad magic in {path}: {detail}")]
    BadMagic { path: String, detail: String },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed header: {0}")]
    MalformedHeader(String),

    #[error("unknown source {0:?}")]
    UnknownSource(String),

    #[error("unknown split {0:?}")]
    UnknownSplit(String),

    #[error("range out of bounds: {0}")]
    RangeOutOfBounds(String),

    #[error("index out of bounds: {0}")]
    IndexOutOfBounds(String),

    #[error("unknown dataset {0:?}")]
    UnknownDataset(String),

    #[error("digest mismatch for {path}: expected {expected}, got {actual}")]
    DigestMismatch {
        path: String,
        expected: String,
        actual: String,
    },

    #[error("missing raw file {0}")]
    MissingRawFile(String),

    #[error("unknown mapping function {0:?}")]
    UnknownFunction(String),

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("state mismatch: {0}")]
    StateMismatch(String),

    #[error("handshake failed: {0}")]
    Handshake(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("variable {0} is not reachable from the cost")]
    Unreachable(String),

    #[error("cost variable must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("no gradient rule for {0} (second-order differentiation is unsupported)")]
    NoGradient(String),

    #[error("brick {0:?} is not allocated")]
    NotAllocated(String),

    #[error("unknown parameter {0:?}")]
    UnknownParameter(String),

    #[error("unbound variable {0:?}")]
    Unbound(String),

    #[error("spec mismatch: {0}")]
    SpecMismatch(String),
}
