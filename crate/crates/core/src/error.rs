use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("cell size must be positive, got {0}")]
    NonPositiveCellSize(f64),

    #[error("k = {k} is out of range for a cloud of {n} points")]
    KOutOfRange { k: usize, n: usize },

    #[error("seed index {seed} is out of range for a cloud of {n} points")]
    SeedOutOfRange { seed: usize, n: usize },

    #[error("operation requires an ellipsoid kernel, got {0}")]
    WrongKind(&'static str),

    #[error("sample count must be at least 1")]
    InvalidCount,

    #[error("radius must be positive, got {0}")]
    NonPositiveRadius(f64),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("neighborhood index was built over {index} points but the cloud has {cloud}")]
    IndexCloudMismatch { index: usize, cloud: usize },

    #[error("forward cache does not match the current layer parameters or cloud")]
    StaleCache,

    #[error("parameter/gradient shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid scene spec: {0}")]
    InvalidSpec(String),

    #[error("labels must contain at least two classes")]
    DegenerateLabels,

    #[error("invalid point cloud: {0}")]
    InvalidCloud(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("unsupported PLY feature: {0}")]
    UnsupportedPly(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn parse(line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }
}
