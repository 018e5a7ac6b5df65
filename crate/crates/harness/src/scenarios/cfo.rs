use airfed_core::channel::{add_awgn, add_noise, apply_cfo, apply_multipath, db_to_linear, SampleStream};
use airfed_core::framing::gen_cfo_subframe;
use airfed_core::ofdm::{OfdmEngine, PilotPlan};
use airfed_core::sync::{cfo_nmse, coarse_cfo_estimate, track_residual_cfo, CfoEstimate};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{sorted_percentile, trial_rng};
use crate::config::ExperimentConfig;
use crate::report::{fmt_f64, Report, Table};
use crate::{sub_seed, HarnessError};

#[derive(Debug, Clone, Copy, Serialize)]
struct CoarseTrial {
    snr_db: f64,
    trial: usize,
    cfo_hz: f64,
    estimate_hz: f64,
    residual_hz: f64,
}

/// Residual CFO after the coarse estimate, per SNR, and the NMSE of the
/// tracked residual against the number of pilots.
pub fn run_cfo(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    let mut report = Report::default();
    let phy = &config.phy;
    let amp = 1.0 / (phy.n_fft as f64).sqrt();
    let preamble = gen_cfo_subframe(phy, phy.m_cfo_init + phy.l_span, amp)?;

    let mut coarse = Table::new(
        "cfo",
        &["snr_db", "trials", "mean_abs_residual_hz", "p95_abs_residual_hz", "max_abs_residual_hz", "frac_within_10hz"],
    );
    for (si, &snr_db) in config.snr_db.iter().enumerate() {
        let trials = (0..config.trials)
            .into_par_iter()
            .map(|trial| {
                let mut rng = trial_rng(config.seed, si as u64, trial as u64);
                let link = config.channel.draw(phy, &mut rng);
                let y = apply_multipath(&preamble, &link.profile, phy)?;
                let y = apply_cfo(&y, link.cfo_hz, phy.fs_hz);
                let y = add_awgn(&y, snr_db, rng.random())?;
                let est = coarse_cfo_estimate(&y, phy)?;
                Ok(CoarseTrial { snr_db, trial, cfo_hz: link.cfo_hz, estimate_hz: est, residual_hz: link.cfo_hz - est })
            })
            .collect::<Result<Vec<_>, airfed_core::Error>>()?;
        let mut abs: Vec<f64> = trials.iter().map(|t| t.residual_hz.abs()).collect();
        abs.sort_by(f64::total_cmp);
        let n = abs.len() as f64;
        coarse.push(vec![
            fmt_f64(snr_db),
            trials.len().to_string(),
            fmt_f64(abs.iter().sum::<f64>() / n),
            fmt_f64(sorted_percentile(&abs, 0.95)),
            fmt_f64(abs[abs.len() - 1]),
            fmt_f64(abs.iter().filter(|&&a| a < 10.0).count() as f64 / n),
        ]);
        for t in &trials {
            report.trace("coarse", t);
        }
    }
    report.tables.push(coarse);
    report.tables.push(tracking_table(config)?);
    Ok(report)
}

/// Each trial tracks one link over `tracking_pilots + 1` pilot receptions.
fn tracking_table(config: &ExperimentConfig) -> Result<Table, HarnessError> {
    let phy = &config.phy;
    let c = &config.cfo;
    let engine = OfdmEngine::<f64>::new(phy);
    let pilot = PilotPlan::<f64>::new(1, config.protocol.pilot_seed, phy).pilot(0).clone();
    let tx = engine.modulate(&pilot);
    let noise_var = 1.0 / (phy.n_fft as f64 * db_to_linear(c.tracking_snr_db));
    let seed = sub_seed(config.seed, u64::MAX, 0);
    let runs = (0..c.tracking_trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = trial_rng(seed, 0, trial as u64);
            let link = config.channel.draw(phy, &mut rng);
            let dfr = rng.random_range(-c.residual_max_hz..=c.residual_max_hz);
            let mut state = CfoEstimate::<f64>::new(0.0);
            let mut means = Vec::with_capacity(c.tracking_pilots);
            for p in 0..=c.tracking_pilots {
                let t0 = (p * c.interval_samples) as f64 * phy.ts();
                let y = apply_multipath(&SampleStream::new(tx.clone(), t0), &link.profile, phy)?;
                let mut y = apply_cfo(&y, dfr, phy.fs_hz);
                add_noise(&mut y.samples, noise_var, &mut rng);
                let sym = engine.demodulate_window(&y.samples, phy.cp_len)?;
                state = track_residual_cfo(&state, &sym, t0)?;
                if p > 0 {
                    means.push(state.residual_hz);
                }
            }
            Ok((dfr, means))
        })
        .collect::<Result<Vec<_>, airfed_core::Error>>()?;
    let truth: Vec<f64> = runs.iter().map(|r| r.0).collect();
    let mut table = Table::new("tracking", &["p", "snr_db", "trials", "nmse", "nmse_ratio_to_p1"]);
    let mut first = f64::NAN;
    for p in 0..c.tracking_pilots {
        let est: Vec<f64> = runs.iter().map(|r| r.1[p]).collect();
        let e = cfo_nmse(&est, &truth)?;
        if p == 0 {
            first = e;
        }
        table.push(vec![
            (p + 1).to_string(),
            fmt_f64(c.tracking_snr_db),
            runs.len().to_string(),
            fmt_f64(e),
            fmt_f64(e / first),
        ]);
    }
    Ok(table)
}
