//! Crate-wide error type.

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

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("{0}: gzip-compressed NIfTI is not supported")]
    CompressedNifti(PathBuf),

    #[error("invalid NIfTI header: {0}")]
    InvalidHeader(String),

    #[error("header/data size mismatch: expected {expected} data bytes, found {found}")]
    DataSizeMismatch { expected: usize, found: usize },

    #[error("value {value} not representable as {datatype}")]
    ValueOutOfRange { value: f64, datatype: &'static str },

    #[error("mask voxel {index} holds non-binary value {value}")]
    NonBinaryMask { index: usize, value: f32 },

    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("bounds violation: {0}")]
    Bounds(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("attention position budget exceeded: {positions} positions > budget {budget}")]
    PositionBudget { positions: usize, budget: usize },

    #[error("backward has already consumed this graph")]
    GraphConsumed,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("undefined result: {0}")]
    Undefined(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("training aborted: {0}")]
    Training(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
