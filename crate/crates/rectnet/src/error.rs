//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("volume payload holds {actual} values but header dims require {expected}")]
    PayloadSizeMismatch { expected: usize, actual: usize },

    #[error("invalid volume geometry: {0}")]
    InvalidGeometry(String),

    #[error("invalid phantom spec: {0}")]
    InvalidPhantom(String),

    #[error("nodule {id} extends outside the lung ellipsoid")]
    NoduleOutsideLung { id: usize },

    #[error("nodules {a} and {b} overlap")]
    OverlappingNodules { a: usize, b: usize },

    #[error("center {center:?} outside volume bounds {dims:?}")]
    CenterOutOfBounds {
        center: (usize, usize, usize),
        dims: (usize, usize, usize),
    },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    #[error("volume id mismatch: candidates from {candidates}, truth from {truth}")]
    VolumeIdMismatch { candidates: String, truth: String },

    #[error("self test failed: {0}")]
    SelfTest(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
