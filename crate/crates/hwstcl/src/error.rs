use std::path::PathBuf;
use thiserror::Error;

/// Library-wide error type for recoverable failures: file I/O, parsing,
/// cohort validation, and configuration problems.
///
/// Programmer errors inside numerical kernels (shape mismatches, invalid
/// axes) panic with a descriptive message instead; they indicate bugs, not
/// bad input data.
#[derive(Debug, Error)]
pub enum HwstclError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    #[error("subject {subject}: {message}")]
    Subject { subject: String, message: String },

    #[error("subject {subject} has {timepoints} time points, fewer than the minimum {min}")]
    TooFewTimepoints {
        subject: String,
        timepoints: usize,
        min: usize,
    },

    #[error("centroid table has {centroid_rois} rows but signals have {signal_rois} ROIs")]
    RoiMismatch {
        centroid_rois: usize,
        signal_rois: usize,
    },

    #[error("invalid config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("non-finite value encountered in {context}")]
    NonFinite { context: String },

    #[error("checkpoint error in {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("{0}")]
    Other(String),
}

impl HwstclError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HwstclError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        HwstclError::Parse {
            path: path.into(),
            message: message.into(),
        }
    }

    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        HwstclError::Config {
            field: field.into(),
            message: message.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, HwstclError>;
