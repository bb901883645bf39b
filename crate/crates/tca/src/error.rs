//! Crate-wide error type and result alias.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, TcaError>;

/// Errors surfaced by the library. The CLI maps these onto exit codes:
/// invalid parameters and configuration problems exit 2, contract
/// violations exit 3, IO and file-format failures exit 4.
#[derive(Debug, thiserror::Error)]
pub enum TcaError {
    #[error("{op}: shape mismatch, left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("invalid parameter `{name}`: {message}")]
    InvalidParameter { name: &'static str, message: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("no table entry for layer {layer}, head {head}")]
    MissingHeadEntry { layer: usize, head: usize },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: bad magic {found:?}, expected `TCAT`")]
    BadMagic { path: PathBuf, found: [u8; 4] },

    #[error("{path}: unsupported format version {found}, expected {expected}")]
    UnsupportedVersion {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: payload length mismatch, expected {expected} bytes, got {got}")]
    TruncatedPayload {
        path: PathBuf,
        expected: u64,
        got: u64,
    },

    #[error("{path}: dimensions {dims:?} outside the supported range")]
    DimOverflow { path: PathBuf, dims: Vec<u64> },

    #[error("{path}: expected a rank-2 tensor, got rank {rank}")]
    UnsupportedRank { path: PathBuf, rank: u32 },

    #[error("{path}: malformed table: {message}")]
    MalformedTable { path: PathBuf, message: String },
}

impl TcaError {
    pub fn invalid(name: &'static str, message: impl Into<String>) -> Self {
        TcaError::InvalidParameter {
            name,
            message: message.into(),
        }
    }

    pub fn contract(message: impl Into<String>) -> Self {
        TcaError::Contract(message.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TcaError::Io {
            path: path.into(),
            source,
        }
    }
}
