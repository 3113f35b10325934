//! Crate-wide error type.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by every module of the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes. Both shapes are named.
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    /// A value outside the mathematical domain of an operation.
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },

    /// NaN or infinite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// An operation was invoked in the wrong lifecycle state.
    #[error("invalid state: {0}")]
    State(String),

    /// Invalid or unsatisfiable configuration.
    #[error("configuration error: {0}")]
    Config(String),

    /// A checkpoint or demonstration file is malformed.
    #[error(transparent)]
    Format(#[from] FormatError),

    /// Planning failed (e.g. a goal references an uncalibrated subtask).
    #[error("planning error: {0}")]
    Planning(String),

    /// Training produced a non-finite loss.
    #[error("training aborted at step {step}: {diagnostic}")]
    Aborted { step: usize, diagnostic: String },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("network error: {0}")]
    Network(String),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Distinct failure modes when decoding binary files.
#[derive(Debug, Error)]
pub enum FormatError {
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: Vec<u8> },

    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: String, found: String },

    #[error("truncated file: needed {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },

    #[error("payload checksum mismatch: header says {expected:08x}, data hashes to {found:08x}")]
    Checksum { expected: u32, found: u32 },

    #[error("malformed header: {0}")]
    Header(String),

    #[error("index inconsistency for {name}: {detail}")]
    Index { name: String, detail: String },

    #[error("dimension mismatch for tensor {name}: checkpoint has {found:?}, model expects {expected:?}")]
    TensorShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}
