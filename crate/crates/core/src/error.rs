use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: every position is masked")]
    InvalidMask { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NotScalar(Vec<usize>),

    #[error("graph has already been back-propagated")]
    AlreadyBackpropagated,

    #[error("index {index} out of bounds for length {bound}")]
    Index { index: usize, bound: usize },

    #[error("expression has no tokens")]
    EmptyExpression,

    #[error("invalid box {0}")]
    InvalidBox(String),

    #[error("degenerate image size {width}x{height}")]
    DegenerateImage { width: f64, height: f64 },

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("missing file {}", .0.display())]
    MissingFile(PathBuf),

    #[error("unsupported format version {found} (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("dangling reference: {0}")]
    DanglingReference(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("checksum mismatch: {0}")]
    Checksum(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
