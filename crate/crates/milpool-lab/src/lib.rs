//! Experiment harness around `milpool-core`: on-disk corpus and checkpoint
//! formats, the two-stage training driver, event scoring, and plot
//! rendering. All numerics live in the core crate; this crate owns files,
//! processes, and the command line.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod pipeline;
pub mod report;
pub mod svg;

use std::path::PathBuf;

/// Process-level failure classes. Each maps to a stable exit code so
/// scripts can branch on outcomes: 1 usage, 2 data or config, 3 numerics.
#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl LabError {
    pub fn usage(msg: impl Into<String>) -> Self {
        LabError::Usage(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        LabError::Data(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            LabError::Usage(_) => 1,
            LabError::Data(_) | LabError::Io { .. } => 2,
            LabError::Numeric(_) => 3,
        }
    }
}

impl From<milpool_core::Error> for LabError {
    fn from(err: milpool_core::Error) -> Self {
        match err {
            milpool_core::Error::NonFinite(_) => LabError::Numeric(err.to_string()),
            other => LabError::Data(other.to_string()),
        }
    }
}

pub type Result<T> = std::result::Result<T, LabError>;
