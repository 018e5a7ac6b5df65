use airfed_core::num::nmse;
use airfed_core::protocol::{run_handshake, ProtocolConfig, RoundOutcome, StageOneTrace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::{sorted_percentile, trial_rng};
use crate::config::ExperimentConfig;
use crate::report::{fmt_f64, fmt_opt, Report, Table};
use crate::{sub_seed, HarnessError};

#[derive(Debug, Clone, Serialize)]
struct SessionTrace<'a> {
    snr_db: f64,
    session: usize,
    stage_one: &'a StageOneTrace,
}

#[derive(Debug, Clone, Serialize)]
struct RoundTrace<'a> {
    snr_db: f64,
    session: usize,
    nmse_d: f64,
    outcome: &'a RoundOutcome,
}

struct Session {
    stage_one: StageOneTrace,
    rounds: Vec<RoundOutcome>,
    nmse: Vec<f64>,
    nmse_uncompensated: Vec<Option<f64>>,
}

fn payload(seed: u64, round: usize, k: usize, len: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, round as u64, k as u64));
    (0..len).map(|_| rng.random_range(-1.0..=1.0)).collect()
}

/// Two sensors send i.i.d. uniform vectors; the AP's aggregate is compared
/// with their exact sum. Compensated runs are paired with uncompensated ones
/// over identical links, payloads and noise.
pub fn run_apb(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    let phy = &config.phy;
    let rounds = config.apb.rounds;
    let mut report = Report::default();
    let mut table = Table::new(
        "apb",
        &[
            "snr_db",
            "session",
            "round",
            "nmse_d",
            "nmse_d_uncompensated",
            "attempts",
            "pilot_gain_re",
            "pilot_gain_im",
            "max_amplification",
            "guard_warning",
            "recorrection",
        ],
    );
    let mut all = Vec::new();
    let mut paired = (0usize, 0usize);
    for (si, &snr_db) in config.snr_db.iter().enumerate() {
        let proto = ProtocolConfig { snr_db: Some(snr_db), ..config.protocol.clone() };
        let len = proto.ota_symbols * phy.used_count();
        let sessions = (0..config.trials)
            .into_par_iter()
            .map(|session| {
                let mut rng = trial_rng(config.seed, si as u64, session as u64);
                let links: Vec<_> = (0..2).map(|_| config.channel.draw(phy, &mut rng)).collect();
                let link_seed: u64 = rng.random();
                let data_seed: u64 = rng.random();
                let truth = |r: usize| -> Vec<f64> {
                    let a = payload(data_seed, r, 0, len);
                    let b = payload(data_seed, r, 1, len);
                    a.iter().zip(&b).map(|(x, y)| x + y).collect()
                };
                let (stage_one, outcomes) =
                    run_handshake::<f64, _>(links.clone(), phy, &proto, rounds, link_seed, |r, k| {
                        payload(data_seed, r, k, len)
                    })?;
                let nmse_of = |o: &RoundOutcome| nmse(&o.aggregate, &truth(o.round)).unwrap_or(f64::NAN);
                let nmse_c: Vec<f64> = outcomes.iter().map(nmse_of).collect();
                let nmse_u = if proto.compensation {
                    let off = ProtocolConfig { compensation: false, ..proto.clone() };
                    let (_, base) = run_handshake::<f64, _>(links, phy, &off, rounds, link_seed, |r, k| {
                        payload(data_seed, r, k, len)
                    })?;
                    base.iter().map(|o| Some(nmse_of(o))).collect()
                } else {
                    vec![None; outcomes.len()]
                };
                Ok(Session { stage_one, rounds: outcomes, nmse: nmse_c, nmse_uncompensated: nmse_u })
            })
            .collect::<Result<Vec<_>, airfed_core::Error>>()?;
        for (session, s) in sessions.iter().enumerate() {
            report.trace("stage_one", &SessionTrace { snr_db, session, stage_one: &s.stage_one });
            for ((o, &e), &u) in s.rounds.iter().zip(&s.nmse).zip(&s.nmse_uncompensated) {
                let max_amp = o.sensors.iter().map(|t| t.amplification).fold(0.0, f64::max);
                table.push(vec![
                    fmt_f64(snr_db),
                    session.to_string(),
                    o.round.to_string(),
                    fmt_f64(e),
                    fmt_opt(u),
                    o.attempts.to_string(),
                    fmt_f64(o.pilot_gain[0]),
                    fmt_f64(o.pilot_gain[1]),
                    fmt_f64(max_amp),
                    o.sensors.iter().any(|t| t.guard_warning).to_string(),
                    o.sensors.iter().any(|t| t.recorrection).to_string(),
                ]);
                report.trace("round", &RoundTrace { snr_db, session, nmse_d: e, outcome: o });
                if let Some(u) = u {
                    paired.0 += 1;
                    paired.1 += usize::from(u >= e);
                }
                all.push((snr_db, e));
            }
        }
    }

    let mut cdf = Table::new("cdf", &["snr_db", "nmse_d", "cdf"]);
    for &snr_db in &config.snr_db {
        let mut v: Vec<f64> = all.iter().filter(|a| a.0 == snr_db).map(|a| a.1).collect();
        v.sort_by(f64::total_cmp);
        let n = v.len() as f64;
        for (i, e) in v.iter().enumerate() {
            cdf.push(vec![fmt_f64(snr_db), fmt_f64(*e), fmt_f64((i + 1) as f64 / n)]);
        }
        let below = |t: f64| v.iter().filter(|&&e| e < t).count() as f64 / n;
        report.summarize(&format!("snr_{snr_db}_frac_below_0.01"), below(0.01));
        report.summarize(&format!("snr_{snr_db}_frac_below_0.05"), below(0.05));
        report.summarize(&format!("snr_{snr_db}_median"), sorted_percentile(&v, 0.5));
    }
    if paired.0 > 0 {
        report.summarize("paired_frac_uncompensated_worse", paired.1 as f64 / paired.0 as f64);
    }
    report.tables.push(table);
    report.tables.push(cdf);
    Ok(report)
}
