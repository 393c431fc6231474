use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),

    #[error("malformed line {0}")]
    MalformedLine(usize),

    #[error("k-core filtering removed every interaction")]
    EmptyCore,

    #[error("bad magic bytes, expected {expected:?}")]
    BadMagic { expected: &'static str },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("no feature row for item {0:?}")]
    MissingItemRow(String),

    #[error("non-finite value at row {row}, col {col}")]
    NonFiniteValue { row: usize, col: usize },

    #[error("node {0} has no train interactions")]
    IsolatedNode(usize),

    #[error("zero vector at row {0}")]
    ZeroVector(usize),

    #[error("k-nearest-neighbour graph needs at least two items")]
    KTooLarge,

    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("empty matrix")]
    EmptyMatrix,

    #[error("row {0} has zero norm")]
    ZeroRow(usize),

    #[error("user {0} has interacted with every item")]
    NoNegativesAvailable(usize),

    #[error("non-finite loss in term {0}")]
    NonFiniteLoss(&'static str),

    #[error("non-finite parameter update in {0}")]
    NonFiniteUpdate(&'static str),

    #[error("training diverged at epoch {0}")]
    Diverged(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_dim(expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimensionMismatch { expected, found })
    }
}
