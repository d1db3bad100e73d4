use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-positive precision {precision} at weight {index} of tensor `{tensor}`")]
    NonPositivePrecision {
        tensor: String,
        index: usize,
        precision: f64,
    },

    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported format version in {path}: file has version {found}, reader supports {supported}")]
    VersionMismatch {
        path: PathBuf,
        found: u16,
        supported: u16,
    },

    #[error("truncated file {path}: {context}")]
    Truncated { path: PathBuf, context: String },

    #[error("checkpoint {path} inconsistent with its network spec: {detail}")]
    SpecInconsistent { path: PathBuf, detail: String },

    #[error("malformed metadata: {0}")]
    Metadata(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("missing prior checkpoint for condition `{0}`")]
    MissingPrior(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Stable numeric code per failure class, used as part of the CLI error text.
    pub fn code(&self) -> u32 {
        match self {
            Error::Shape(_) => 10,
            Error::InvalidInput(_) => 11,
            Error::NonPositivePrecision { .. } => 12,
            Error::BadMagic { .. } => 20,
            Error::VersionMismatch { .. } => 21,
            Error::Truncated { .. } => 22,
            Error::SpecInconsistent { .. } => 23,
            Error::Metadata(_) => 24,
            Error::Config(_) => 30,
            Error::MissingPrior(_) => 31,
            Error::Io { .. } => 40,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
