//! Experiment runner: config loading, scenarios and report files.

pub mod config;
pub mod report;
pub mod scenarios;

use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use config::{load_config, ExperimentConfig, Overrides, Scenario};
pub use report::{emit_report, Manifest, Report, Table};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config error: {0}")]
    Config(String),
    #[error("protocol abort: {0}")]
    Protocol(airfed_core::Error),
    #[error(transparent)]
    Core(airfed_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl From<airfed_core::Error> for HarnessError {
    fn from(e: airfed_core::Error) -> Self {
        use airfed_core::Error as E;
        match e {
            E::Config(m) => HarnessError::Config(m),
            E::Profile(m) => HarnessError::Config(format!("multipath profile: {m}")),
            E::TimingOffsetTooLarge { .. } => HarnessError::Config(e.to_string()),
            E::ProtocolAbort { .. } | E::DetectionFailed { .. } | E::SyncLoss { .. } => HarnessError::Protocol(e),
            other => HarnessError::Core(other),
        }
    }
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Protocol(_) => 3,
            _ => 1,
        }
    }
}

/// Independent seed for the `(a, b)` sub-experiment of a run seeded with `seed`.
pub fn sub_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(a);
    rng.set_word_pos(u128::from(b) * 2);
    rng.next_u64()
}

/// Validates, runs and writes one scenario. Returns the report for inspection.
pub fn run_and_emit(scenario: Scenario, config: &ExperimentConfig, out_dir: &Path) -> Result<Report, HarnessError> {
    config.validate(scenario)?;
    let report = scenarios::run(scenario, config)?;
    emit_report(scenario, config, &report, out_dir)?;
    Ok(report)
}
