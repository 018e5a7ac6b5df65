use airfed_core::channel::{add_noise, apply_multipath, db_to_linear, rotate_in_place, PhyConfig, SampleStream};
use airfed_core::framing::{detect_frame_within, gen_cfo_subframe, gen_ft};
use num_complex::Complex;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::trial_rng;
use crate::config::ExperimentConfig;
use crate::report::{fmt_f64, Report, Table};
use crate::HarnessError;

#[derive(Debug, Clone, Copy, Serialize)]
struct Cell {
    m_ft: usize,
    snr_db: f64,
    trials: usize,
    valid: usize,
    correct: usize,
    peak_mean: f64,
}

/// Probability of a valid correlation peak and of the correct frame start given
/// one, per `(M_FT, SNR)` cell.
pub fn run_frame_timing(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    let mut report = Report::default();
    let mut table = Table::new(
        "frame-timing",
        &[
            "m_ft",
            "snr_db",
            "trials",
            "valid",
            "correct",
            "p_detect",
            "p_correct_sync",
            "p_correct_given_valid",
            "peak_mean",
        ],
    );
    let window = config.frame_timing.search_window;
    for (mi, &m_ft) in config.frame_timing.m_ft.iter().enumerate() {
        let phy = PhyConfig { m_ft, ..config.phy.clone() };
        let ft = gen_ft(&phy, config.protocol.ft_seed)?;
        let mut frame = ft.to_stream(1.0f64).samples;
        frame.extend(gen_cfo_subframe(&phy, phy.m_cfo_frame, 1.0f64)?.samples);
        for (si, &snr_db) in config.snr_db.iter().enumerate() {
            let cell_id = (mi * config.snr_db.len() + si) as u64;
            let noise_var = 1.0 / db_to_linear(snr_db);
            let outcomes = (0..config.trials as u64)
                .into_par_iter()
                .map(|trial| {
                    let mut rng = trial_rng(config.seed, cell_id, trial);
                    let link = config.channel.draw(&phy, &mut rng);
                    let start = rng.random_range(0..window);
                    let mut buf = vec![Complex::new(0.0, 0.0); start];
                    buf.extend_from_slice(&frame);
                    let mut y = apply_multipath(&SampleStream::new(buf, 0.0), &link.profile, &phy)?;
                    rotate_in_place(&mut y.samples, link.cfo_hz, 0.0, phy.fs_hz);
                    add_noise(&mut y.samples, noise_var, &mut rng);
                    let d = detect_frame_within(&y.samples, &ft, &phy, 2 * window)?;
                    Ok((d.valid, d.valid && d.m0 == start, d.peak))
                })
                .collect::<Result<Vec<_>, airfed_core::Error>>()?;
            let valid = outcomes.iter().filter(|o| o.0).count();
            let correct = outcomes.iter().filter(|o| o.1).count();
            let peak_mean = outcomes.iter().map(|o| o.2).sum::<f64>() / outcomes.len() as f64;
            let n = outcomes.len() as f64;
            let given_valid = if valid > 0 { correct as f64 / valid as f64 } else { f64::NAN };
            table.push(vec![
                m_ft.to_string(),
                fmt_f64(snr_db),
                outcomes.len().to_string(),
                valid.to_string(),
                correct.to_string(),
                fmt_f64(valid as f64 / n),
                fmt_f64(correct as f64 / n),
                fmt_f64(given_valid),
                fmt_f64(peak_mean),
            ]);
            report.trace("cell", &Cell { m_ft, snr_db, trials: outcomes.len(), valid, correct, peak_mean });
        }
    }
    report.tables.push(table);
    Ok(report)
}
