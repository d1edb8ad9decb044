use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum LdhError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("unsupported pixel format in {path}: {format}")]
    UnsupportedFormat { path: PathBuf, format: String },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("region {0} is out of bounds")]
    OutOfBounds(String),
    #[error("regions overlap: {0}")]
    Overlap(String),
    #[error("could not place {wanted} disjoint regions after {attempts} attempts")]
    Overcrowded { wanted: usize, attempts: usize },
    #[error("invalid distortion: {0}")]
    Distortion(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: u64, loss: f64 },
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("map is not binary")]
    NonBinaryMap,
    #[error("cannot write report: {0}")]
    Report(String),
    #[error("restoration hook failed: {0}")]
    Restoration(String),
}

impl LdhError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = LdhError> = std::result::Result<T, E>;
