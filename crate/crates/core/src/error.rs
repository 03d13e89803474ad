use std::path::PathBuf;

use crate::Voxel;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("file not found: {0}")]
    NotFound(PathBuf),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed NIfTI data: {0}")]
    Nifti(String),

    #[error("expected a 3D volume, found {0} dimensions")]
    Dimensionality(usize),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Vec<usize>, found: Vec<usize> },

    #[error("bounding box {min:?}..={max:?} does not fit extent {extent:?}")]
    BoxOutOfRange {
        min: Voxel,
        max: Voxel,
        extent: Voxel,
    },

    #[error("invalid annotation: {0}")]
    InvalidAnnotation(String),

    #[error("annotation label {value} at {voxel:?} is not one of 0, 1, 2")]
    BadLabel { value: i64, voxel: Voxel },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite loss ({0})")]
    NonFiniteLoss(f64),

    #[error("volume id '{0}' already assigned")]
    DuplicateId(String),

    #[error("unknown volume '{0}'")]
    UnknownVolume(String),

    #[error("model not ready: no checkpoint has been published yet")]
    ModelNotReady,

    #[error("event at t={found} precedes last recorded t={last}")]
    OutOfOrder { last: f64, found: f64 },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("server unreachable: {0}")]
    Unreachable(String),

    #[error("server rejected request ({status}): {message}")]
    Rejected { status: u16, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::NotFound(path)
        } else {
            Error::Io { path, source }
        }
    }
}
