use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported shape: {0}")]
    UnsupportedShape(String),

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("duplicate modality '{modality}' in case '{case_id}'")]
    DuplicateModality { case_id: String, modality: String },

    #[error("not found: {0}")]
    NotFound(String),

    #[error("invalid modality name '{0}'")]
    InvalidName(String),

    #[error("unknown modality '{0}' (not in embedding table and fallback disabled)")]
    UnknownModality(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("empty batch")]
    EmptyBatch,

    #[error("session '{0}' has no visible tokens")]
    EmptySession(String),

    #[error("degenerate loss: no hidden valid voxels")]
    DegenerateLoss,

    #[error("batch of {0} is too small for batch statistics (need at least 2)")]
    InsufficientBatch(usize),

    #[error("non-finite loss component: {0}")]
    NonFiniteLoss(String),

    #[error("non-finite gradient in '{0}'")]
    NonFiniteGradient(String),

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("empty mask")]
    EmptyMask,
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
