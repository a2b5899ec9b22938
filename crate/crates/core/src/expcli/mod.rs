//! Experiment commands behind the `timlab` binary: config files, run
//! outputs, comparison matrices, offline trace analysis and the self-test.

pub mod analyze;
pub mod compare;
pub mod config;
pub mod metrics;
pub mod run;
pub mod selftest;

use std::path::Path;

pub use analyze::{cmd_analyze, AnalysisReport};
pub use compare::{cmd_compare, SummaryRow};
pub use config::{config_hash, load_config};
pub use run::{cmd_run, RunManifest, RunOptions, RunOutcome};
pub use selftest::{cmd_selftest, ContractResult, SelftestOptions};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_DIVERGED: i32 = 2;
pub const EXIT_CONTRACT: i32 = 3;

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "TIMLAB_OUT";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Rollout(#[from] crate::rollout::RolloutError),
}

impl CliError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::File { path: path.display().to_string(), source }
    }

    pub fn exit_code(&self) -> i32 {
        EXIT_CONFIG
    }
}
