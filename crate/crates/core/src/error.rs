use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty tensor: {0}")]
    EmptyTensor(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("manifest parse error: {0}")]
    ManifestParse(String),

    #[error("weight archive error: {0}")]
    WeightArchive(String),

    #[error("graph validation error: {0}")]
    GraphValidation(String),

    #[error("fusion topology error: {0}")]
    FusionTopology(String),

    #[error("input shape error: expected {expected:?}, got {got:?}")]
    InputShape { expected: Vec<usize>, got: Vec<usize> },

    #[error("mask reference error: {0}")]
    MaskReference(String),

    #[error("trace mismatch error: {0}")]
    TraceMismatch(String),

    #[error("empty dataset error: {0}")]
    EmptyDataset(String),

    #[error("k out of range: k={k}, available={available}")]
    KOutOfRange { k: usize, available: usize },

    #[error("undefined AP: {0}")]
    UndefinedAp(String),

    #[error("decode error: {path}: {msg}")]
    Decode { path: PathBuf, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("fixture error: {0}")]
    Fixture(String),

    #[error("io error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad user input or configuration rather than
    /// a failure during computation.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::InvalidArgument(_) | Error::KOutOfRange { .. }
        )
    }
}
