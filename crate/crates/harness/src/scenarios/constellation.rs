use airfed_core::channel::{add_noise, apply_multipath, apply_timing_offset, db_to_linear, split_offset, SampleStream};
use airfed_core::ofdm::{demap_qam, equalize, ls_channel_estimate, map_qam, ramp_symbol, OfdmEngine, PilotPlan};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::trial_rng;
use crate::config::ExperimentConfig;
use crate::report::{fmt_f64, Report, Table};
use crate::HarnessError;

#[derive(Debug, Clone, Copy, Serialize)]
struct FrameSummary {
    snr_db: f64,
    frame: usize,
    bit_errors: usize,
    bits: usize,
    evm_rms: f64,
}

/// Received QAM points before and after one-tap equalization with the LS
/// estimate from a preceding pilot symbol.
pub fn run_constellation(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    let phy = &config.phy;
    let c = &config.constellation;
    let engine = OfdmEngine::<f64>::new(phy);
    let pilot = PilotPlan::<f64>::new(1, config.protocol.pilot_seed, phy).pilot(0).clone();
    let bits_per_symbol = phy.used_count() * if c.qam_order == 4 { 2 } else { 4 };
    let sym_len = phy.symbol_len();
    let start = phy.cp_len - phy.window_backoff;

    let mut report = Report::default();
    let mut table = Table::new(
        "constellation",
        &["snr_db", "frame", "symbol", "carrier", "tx_re", "tx_im", "rx_re", "rx_im", "eq_re", "eq_im"],
    );
    for (si, &snr_db) in config.snr_db.iter().enumerate() {
        let noise_var = 1.0 / (phy.n_fft as f64 * db_to_linear(snr_db));
        let frames = (0..config.trials)
            .into_par_iter()
            .map(|frame| {
                let mut rng = trial_rng(config.seed, si as u64, frame as u64);
                let link = config.channel.draw(phy, &mut rng);
                let bits: Vec<Vec<bool>> =
                    (0..c.data_symbols).map(|_| (0..bits_per_symbol).map(|_| rng.random()).collect()).collect();
                let data = bits.iter().map(|b| map_qam::<f64>(b, c.qam_order, phy)).collect::<Result<Vec<_>, _>>()?;
                // Fractional timing offset per symbol, whole samples on the stream.
                let (whole, frac) = split_offset(link.to_dl_s, phy.fs_hz);
                let mut tx = Vec::with_capacity((c.data_symbols + 1) * sym_len);
                for s in std::iter::once(&pilot).chain(&data) {
                    let mut s = s.clone();
                    ramp_symbol(&mut s, frac);
                    tx.extend(engine.modulate(&s));
                }
                let y = apply_multipath(&SampleStream::new(tx, 0.0), &link.profile, phy)?;
                let mut y = apply_timing_offset(&y, whole as f64 * phy.ts(), phy)?;
                add_noise(&mut y.samples, noise_var, &mut rng);
                let rx_pilot = engine.demodulate_window(&y.samples, start)?;
                let est = ls_channel_estimate(&rx_pilot, &pilot, 0.0, phy)?;
                let mut rows = Vec::new();
                let (mut errors, mut evm) = (0usize, 0.0);
                for (j, d) in data.iter().enumerate() {
                    let rx = engine.demodulate_window(&y.samples, start + (j + 1) * sym_len)?;
                    let (eq, _) = equalize(&rx, &est);
                    let decided = demap_qam(&eq, c.qam_order, phy)?;
                    errors += decided.iter().zip(&bits[j]).filter(|(a, b)| a != b).count();
                    for pos in phy.used_positions() {
                        evm += (eq.freq[pos] - d.freq[pos]).norm_sqr();
                        rows.push([
                            j as f64,
                            pos as f64,
                            d.freq[pos].re,
                            d.freq[pos].im,
                            rx.freq[pos].re,
                            rx.freq[pos].im,
                            eq.freq[pos].re,
                            eq.freq[pos].im,
                        ]);
                    }
                }
                let points = (c.data_symbols * phy.used_count()) as f64;
                let summary = FrameSummary {
                    snr_db,
                    frame,
                    bit_errors: errors,
                    bits: bits_per_symbol * c.data_symbols,
                    evm_rms: (evm / points).sqrt(),
                };
                Ok((rows, summary))
            })
            .collect::<Result<Vec<_>, airfed_core::Error>>()?;
        for (frame, (rows, summary)) in frames.iter().enumerate() {
            for r in rows {
                let mut row = vec![fmt_f64(snr_db), frame.to_string(), (r[0] as usize).to_string()];
                row.push((airfed_core::dsp::centered_carrier(r[1] as usize, phy.n_fft)).to_string());
                row.extend(r[2..].iter().map(|v| fmt_f64(*v)));
                table.push(row);
            }
            report.trace("frame", summary);
        }
        let bit_errors: usize = frames.iter().map(|f| f.1.bit_errors).sum();
        report.summarize(&format!("bit_errors_snr_{snr_db}"), bit_errors);
    }
    report.tables.push(table);
    Ok(report)
}
