//! Pipeline commands behind the `hts-surrogate` binary.
//!
//! Every command reads a [`PipelineConfig`] and works inside its output
//! directory:
//!
//! ```text
//! data/{split}.sfds           datasets and data/index.json
//! models/                     checkpoints, run records, loss curves
//! sweep/                      sweep checkpoints and report
//! eval/                       evaluation report, CSV grids, SVG plots
//! bench/                      timing table
//! ```

pub mod commands;
pub mod config;

pub use commands::{cmd_bench, cmd_eval, cmd_generate, cmd_sweep, cmd_train, RunOptions};
pub use config::PipelineConfig;

use hts_surrogate::analysis::AnalysisError;
use hts_surrogate::autonet::AutonetError;
use hts_surrogate::dataset::DatasetError;
use hts_surrogate::trainer::TrainError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("{0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Internal(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Divergence(_) => 4,
            CliError::Solver(_) => 5,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        match e {
            DatasetError::Solver { .. } => CliError::Solver(e.to_string()),
            DatasetError::Plan(_) => CliError::Config(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

impl From<AutonetError> for CliError {
    fn from(e: AutonetError) -> Self {
        match e {
            AutonetError::ArchMismatch { .. } => CliError::Config(e.to_string()),
            AutonetError::Io(_) | AutonetError::Checkpoint(_) => CliError::Data(e.to_string()),
            AutonetError::NonFiniteGradient { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Internal(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidHyper(_) => CliError::Config(e.to_string()),
            TrainError::Data(_) => CliError::Data(e.to_string()),
            TrainError::NoCheckpoint { .. } => CliError::Divergence(e.to_string()),
            TrainError::Network(inner) => inner.into(),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Network(inner) => inner.into(),
            AnalysisError::Dataset(inner) => inner.into(),
            AnalysisError::Solver(inner) => CliError::Solver(inner.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}
