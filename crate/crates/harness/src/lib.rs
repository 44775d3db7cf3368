//! Experiment orchestration for gamma-activation RNNs: configuration,
//! training loops, grid scans, transfer retraining, evaluation, and the
//! files each run leaves behind.

use thiserror::Error;

pub mod commands;
pub mod config;
pub mod record;
pub mod train;

pub use commands::{cmd_eval, cmd_grid, cmd_train, cmd_transfer, EvalRequest, GridMeasure, GridRequest, TransferConfig};
pub use config::{GridConfig, Precision, RunConfig, TaskConfig, DATA_DIR_ENV};
pub use record::{RecordRow, RunRecord};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl HarnessError {
    /// 1 for configuration and I/O problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Numerical(_) => 2,
            HarnessError::Config(_) | HarnessError::Io(_) => 1,
        }
    }
}

impl From<gamma_rnn::RnnError> for HarnessError {
    fn from(e: gamma_rnn::RnnError) -> Self {
        use gamma_rnn::RnnError::*;
        match e {
            NonFinite { .. } | NonFiniteLoss(_) => HarnessError::Numerical(e.to_string()),
            _ => HarnessError::Config(e.to_string()),
        }
    }
}

impl From<gamma_rnn::TaskError> for HarnessError {
    fn from(e: gamma_rnn::TaskError) -> Self {
        match e {
            gamma_rnn::TaskError::Io { .. } => HarnessError::Io(e.to_string()),
            _ => HarnessError::Config(e.to_string()),
        }
    }
}

impl From<gamma_rnn::CheckpointError> for HarnessError {
    fn from(e: gamma_rnn::CheckpointError) -> Self {
        match e {
            gamma_rnn::CheckpointError::Io { .. } => HarnessError::Io(e.to_string()),
            _ => HarnessError::Config(e.to_string()),
        }
    }
}

impl From<gamma_rnn::DiagnosticsError> for HarnessError {
    fn from(e: gamma_rnn::DiagnosticsError) -> Self {
        use gamma_rnn::DiagnosticsError::*;
        match e {
            RankCollapse { .. } | NonFinite { .. } => HarnessError::Numerical(e.to_string()),
            _ => HarnessError::Config(e.to_string()),
        }
    }
}
