use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Every failure the workbench can surface.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("{op}: last axis has extent {extent}, need at least 2")]
    DegenerateAxis { op: &'static str, extent: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("embedding dimension must be even, got {0}")]
    OddDimension(usize),

    #[error("condition id {id} outside [0, {num_classes})")]
    InvalidCondition { id: usize, num_classes: usize },

    #[error("timestep {t} outside [0, {max}]")]
    InvalidTimestep { t: f64, max: f64 },

    #[error("dimension {dim} outside [0, {extent})")]
    DimensionOutOfRange { dim: usize, extent: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("missing required config section [{0}]")]
    MissingSection(&'static str),

    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported checkpoint version {found} (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },

    #[error("checkpoint truncated while reading {0}")]
    Truncated(String),

    #[error("malformed checkpoint: {0}")]
    MalformedCheckpoint(String),

    #[error("unsupported CSV schema {0:?}")]
    CsvSchema(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this failure class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::MissingSection(_) | Error::InvalidParameter(_) => 2,
            Error::NonFinite { .. } => 3,
            Error::Io { .. }
            | Error::BadMagic(_)
            | Error::VersionMismatch { .. }
            | Error::Truncated(_)
            | Error::MalformedCheckpoint(_)
            | Error::CsvSchema(_) => 4,
            _ => 1,
        }
    }
}
