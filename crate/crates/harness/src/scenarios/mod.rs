//! One module per experiment. Scenarios share only library code; each
//! derives its randomness from the run seed alone.

mod apb;
mod cfo;
mod constellation;
mod frame_timing;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{ExperimentConfig, Scenario};
use crate::report::Report;
use crate::{sub_seed, HarnessError};

pub use apb::run_apb;
pub use cfo::run_cfo;
pub use constellation::run_constellation;
pub use frame_timing::run_frame_timing;
pub use train::{run_e2e, run_train};

pub fn run(scenario: Scenario, config: &ExperimentConfig) -> Result<Report, HarnessError> {
    match scenario {
        Scenario::FrameTiming => run_frame_timing(config),
        Scenario::Cfo => run_cfo(config),
        Scenario::Constellation => run_constellation(config),
        Scenario::Apb => run_apb(config),
        Scenario::Train => run_train(config),
        Scenario::E2e => run_e2e(config),
    }
}

fn trial_rng(seed: u64, cell: u64, trial: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(sub_seed(seed, cell, trial))
}

/// Nearest-rank percentile of already sorted values.
fn sorted_percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((q * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}
