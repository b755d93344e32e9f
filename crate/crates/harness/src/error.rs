use std::path::PathBuf;

use allo_core::dynamics::DynamicsError;
use allo_core::gridworld::GridError;
use allo_core::metrics::MetricsError;
use allo_core::mlp::MlpError;
use allo_core::spectral::SpectralError;
use allo_core::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cannot read config {path}: {source}")]
    ConfigRead { path: PathBuf, source: std::io::Error },
    #[error("invalid config {path}: {message}")]
    ConfigParse { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("cannot read {path}: {message}")]
    Input { path: PathBuf, message: String },
    #[error("logs do not share a checkpoint grid: {0}")]
    MismatchedGrids(String),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Mlp(#[from] MlpError),
    #[error("all {0} runs failed")]
    AllRunsFailed(usize),
    #[error("verification failed: {0}")]
    Verification(String),
}

impl HarnessError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.into(), source }
    }

    /// Process exit code: 2 for configuration problems, 3 for data and
    /// file problems, 4 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::ConfigRead { .. } | HarnessError::ConfigParse { .. } | HarnessError::Config(_) => 2,
            HarnessError::Train(TrainError::Config(_))
            | HarnessError::Dynamics(DynamicsError::Config(_) | DynamicsError::Permutation(_)) => 2,
            HarnessError::Grid(_)
            | HarnessError::Io { .. }
            | HarnessError::Metrics(_)
            | HarnessError::Input { .. }
            | HarnessError::MismatchedGrids(_)
            | HarnessError::Train(TrainError::EmptyDataset)
            | HarnessError::Mlp(MlpError::Io(_) | MlpError::Checkpoint(_)) => 3,
            _ => 4,
        }
    }
}
