//! Run configuration, experiment orchestration and on-disk artifacts.

mod config;
mod container;
pub mod gradsuite;
mod run;

use std::path::{Path, PathBuf};

pub use config::{DataSource, FoldConfig, RunConfig};
pub use container::Container;
pub use run::*;

use crate::data::DataError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::tensor::TensorError;
use crate::train::TrainError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {reason}", path.display())]
    Container { path: PathBuf, reason: String },
    #[error("{}: config fingerprint mismatch (expected {expected}, file has {found})", path.display())]
    Fingerprint { path: PathBuf, expected: String, found: String },
    #[error("fold {fold}: {source}")]
    Fold { fold: usize, source: Box<HarnessError> },
    #[error("gradient check failed: {0}")]
    GradCheck(String),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.to_path_buf(),
            source,
        }
    }

    /// 1 for invalid input or configuration, 2 for failures while running,
    /// 3 for a failed gradient check.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) | HarnessError::Container { .. } | HarnessError::Fingerprint { .. } => 1,
            HarnessError::Data(DataError::Io { .. }) => 2,
            HarnessError::Data(_) => 1,
            HarnessError::Metrics(MetricsError::Empty) => 1,
            HarnessError::Fold { source, .. } => source.exit_code(),
            HarnessError::GradCheck(_) => 3,
            _ => 2,
        }
    }
}
