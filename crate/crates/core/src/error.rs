use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("point has non-positive depth z = {z}")]
    NonPositiveDepth { z: f64 },

    #[error("degenerate disparity {disparity} px (minimum {minimum} px)")]
    DegenerateDisparity { disparity: f64, minimum: f64 },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("near-singular observation covariance (condition number {condition:e})")]
    NearSingularWeight { condition: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("motion is unobservable from {usable} correspondences")]
    UnobservableMotion { usable: usize },

    #[error("length mismatch: expected {expected}, found {found}")]
    LengthMismatch { expected: usize, found: usize },

    #[error("training failed: {0}")]
    Training(String),

    #[error("configuration error: {0}")]
    Configuration(String),

    #[error("corrupt model file: {0}")]
    CorruptModel(String),

    #[error("unsupported model version {found} (expected {expected})")]
    ModelVersion { found: u32, expected: u32 },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("no visible landmarks at frame {frame}")]
    NoVisibleLandmarks { frame: usize },

    #[error("frame {frame}: {source}")]
    Frame {
        frame: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn csv(path: impl Into<PathBuf>, source: csv::Error) -> Self {
        Error::Csv {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_frame(self, frame: usize) -> Self {
        match self {
            e @ Error::Frame { .. } => e,
            other => Error::Frame {
                frame,
                source: Box::new(other),
            },
        }
    }

    /// True for errors caused by bad input data or files rather than bad
    /// arguments.
    pub fn is_data_error(&self) -> bool {
        !matches!(
            self,
            Error::InvalidParameter(_) | Error::Configuration(_)
        )
    }
}
