//! Operational surface of `pdaanet-core`: configuration files, dataset export,
//! training runs with persisted metrics and parameters, ablations, sweeps,
//! feature projections, the gradient-check suite and the acceptance checks.

use std::path::Path;

use pdaanet_core::config::ConfigError;
use pdaanet_core::train::TrainError;

pub mod acceptance;
pub mod config;
pub mod data;
pub mod experiments;
pub mod gradsuite;
pub mod oracles;
pub mod run;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        HarnessError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn csv(path: &Path, e: csv::Error) -> Self {
        HarnessError::Format {
            path: path.display().to_string(),
            msg: e.to_string(),
        }
    }
}

impl From<pdaanet_core::TensorError> for HarnessError {
    fn from(e: pdaanet_core::TensorError) -> Self {
        HarnessError::Train(TrainError::Tensor(e))
    }
}
