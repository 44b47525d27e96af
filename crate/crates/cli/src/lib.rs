//! Experiment harness: dataset generation, training, evaluation sweeps,
//! ensembler and latency benchmarks, and kinematics checks.

pub mod commands;
pub mod config;
pub mod results;

pub use commands::RunOptions;
pub use config::ExperimentConfig;
pub use results::{ResultRow, ResultsTable};

/// Failure classes with their process exit codes.
#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("{0:#}")]
    Runtime(#[from] anyhow::Error),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Runtime(_) => 3,
        }
    }
}
