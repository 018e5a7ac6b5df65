use std::path::PathBuf;
use std::process::ExitCode;

use airfed_harness::{load_config, run_and_emit, HarnessError, Overrides, Scenario};
use clap::Parser;

/// Run one over-the-air federated learning experiment.
#[derive(Debug, Parser)]
#[command(name = "airfed", version, about)]
struct Cli {
    /// frame-timing, cfo, constellation, apb, train or e2e
    scenario: Scenario,
    /// Experiment JSON file, or a manifest.json from an earlier run to replay it.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated SNR values in dB.
    #[arg(long = "snr-db", value_delimiter = ',', allow_hyphen_values = true)]
    snr_db: Option<Vec<f64>>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    no_compensation: bool,
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let mut config = load_config(&cli.config, cli.scenario)?;
    config.apply(&Overrides {
        seed: cli.seed,
        snr_db: cli.snr_db.clone(),
        trials: cli.trials,
        no_compensation: cli.no_compensation,
    });
    let report = run_and_emit(cli.scenario, &config, &cli.out)?;
    for (k, v) in &report.summary {
        println!("{k}: {v}");
    }
    println!("wrote {}", cli.out.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("airfed: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
