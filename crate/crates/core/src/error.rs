use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TidError> = std::result::Result<T, E>;

/// Why a TIDT byte stream could not be decoded.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("bad magic bytes {found:?}, expected \"TIDT\"")]
    BadMagic { found: [u8; 4] },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("invalid axis count {0}, expected 1 to 4")]
    BadRank(u32),
    #[error("axis {axis} has zero extent")]
    ZeroExtent { axis: usize },
    #[error("truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("{extra} trailing bytes after payload")]
    TrailingData { extra: usize },
    #[error("non-finite value at flat index {index}")]
    NonFinite { index: usize },
}

#[derive(Debug, Error)]
pub enum TidError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode tensor file {path}: {kind}")]
    Decode { path: PathBuf, kind: DecodeError },
    #[error("malformed json in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("invalid tensor: {0}")]
    InvalidTensor(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("cannot place {n_objects} objects: {reason}")]
    Placement { n_objects: usize, reason: String },
    #[error("simulation diverged at step {step}: loss is {loss}")]
    Divergence { step: usize, loss: f64 },
}

impl TidError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TidError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        TidError::Json {
            path: path.into(),
            source,
        }
    }
}
