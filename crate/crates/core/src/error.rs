use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Coarse classification used by front ends to pick an exit status.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    /// Unreadable or malformed input data.
    Input,
    /// Inconsistent or out-of-range parameters.
    Config,
    /// An internal invariant did not hold.
    Invariant,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed feature file: {0}")]
    MalformedHeader(String),

    #[error("feature array must be 2-D, found {0} dimension(s)")]
    NotTwoDimensional(usize),

    #[error("unsupported element type: {0}")]
    UnsupportedElementType(String),

    #[error("row {row} has zero L2 norm and cannot be normalized")]
    ZeroNormRow { row: usize },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("empty matrix ({rows} x {dim})")]
    EmptyMatrix { rows: usize, dim: usize },

    #[error("metadata: {0}")]
    Meta(String),

    #[error("duplicate image_id {0:?}")]
    DuplicateImageId(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },

    #[error("{what}: length mismatch, expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("row {row} out of range for {rows} rows")]
    InvalidRow { row: usize, rows: usize },

    #[error("requested {requested} bytes exceeds memory budget of {budget} bytes")]
    MemoryBudget { requested: usize, budget: usize },

    #[error("invalid distance {0}")]
    InvalidDistance(f64),

    #[error("empty distance list")]
    EmptyDistances,

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("index file: {0}")]
    IndexFormat(String),

    #[error("invariant violated: {0}")]
    Invariant(String),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::InvalidParam(_) | Error::MemoryBudget { .. } => ErrorKind::Config,
            Error::Invariant(_) => ErrorKind::Invariant,
            _ => ErrorKind::Input,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::InvalidParam(msg.into())
    }
}
