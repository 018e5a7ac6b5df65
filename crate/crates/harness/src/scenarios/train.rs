use airfed_core::fl::{gen_rss_map, heatmap, median, train, ExactAggregator, OtaAggregator, TrainConfig, TrainReport};
use airfed_core::protocol::{validate_sequence, ProtocolConfig, SensorRoundTrace};
use serde::Serialize;

use super::trial_rng;
use crate::config::ExperimentConfig;
use crate::report::{fmt_f64, fmt_opt, Report, Table};
use crate::{sub_seed, HarnessError};

struct Runs {
    ota: TrainReport,
    offline: TrainReport,
    attempts: Vec<usize>,
    links: Vec<(usize, Vec<SensorRoundTrace>)>,
    report: Report,
}

#[derive(Serialize)]
struct LinkRound<'a> {
    t: usize,
    attempts: usize,
    failures: &'a [String],
    pilot_gain: [f64; 2],
}

/// Paired OTA and offline training over identical data, initial weights and batches.
fn run_pair(config: &ExperimentConfig, keep_links: bool) -> Result<Runs, HarnessError> {
    let (map, datasets, norm) = gen_rss_map(&config.map, sub_seed(config.seed, 0, 0))?;
    let train_cfg = TrainConfig {
        model_seed: sub_seed(config.seed, 1, config.train.model_seed),
        batch_seed: sub_seed(config.seed, 2, config.train.batch_seed),
        ..config.train.clone()
    };
    let mut rng = trial_rng(config.seed, 3, 0);
    let links: Vec<_> = (0..config.map.n_sensors).map(|_| config.channel.draw(&config.phy, &mut rng)).collect();
    let proto = ProtocolConfig { snr_db: Some(config.snr_db[0]), ..config.protocol.clone() };

    let mut report = Report::default();
    let offline = train(&datasets, &train_cfg, &mut ExactAggregator, |_, _| {})?;
    let n_params = offline.model.n_params();
    let mut agg = OtaAggregator::<f64>::new(config.phy.clone(), proto, links, n_params, sub_seed(config.seed, 4, 0))?;
    report.trace("stage_one", &agg.stage_one);
    let mut attempts = Vec::with_capacity(train_cfg.rounds);
    let mut link_rows = Vec::new();
    let ota = train(&datasets, &train_cfg, &mut agg, |r, link| {
        if let Some(o) = link {
            attempts.push(o.attempts);
            if keep_links {
                link_rows.push((r.t, o.sensors.clone()));
                report.trace(
                    "link",
                    &LinkRound { t: r.t, attempts: o.attempts, failures: &o.failures, pilot_gain: o.pilot_gain },
                );
            }
        }
    })?;
    if keep_links {
        let ok = validate_sequence(agg.session().events()).is_ok();
        report.summarize("event_sequence_valid", ok);
        report.summarize("events", agg.session().events().len());
    }

    let cells_ota = heatmap(&ota.model, &map, &norm, config.heatmap_step_m);
    let cells_off = heatmap(&offline.model, &map, &norm, config.heatmap_step_m);
    let mut heat = Table::new(
        "heatmap",
        &["x_m", "y_m", "truth_dbm", "pred_ota_dbm", "pred_offline_dbm", "nmse_ota", "nmse_offline"],
    );
    for (a, b) in cells_ota.iter().zip(&cells_off) {
        heat.push(vec![
            fmt_f64(a.x_m),
            fmt_f64(a.y_m),
            fmt_f64(a.truth_dbm),
            fmt_f64(a.pred_dbm),
            fmt_f64(b.pred_dbm),
            fmt_f64(a.nmse),
            fmt_f64(b.nmse),
        ]);
    }
    let med_ota = median(&cells_ota.iter().map(|c| c.nmse).collect::<Vec<_>>());
    let med_off = median(&cells_off.iter().map(|c| c.nmse).collect::<Vec<_>>());
    let divergence = ota.rounds.iter().zip(&offline.rounds).map(|(a, b)| (a.loss - b.loss).abs()).fold(0.0, f64::max);
    report.summarize("final_loss_ota", ota.final_loss());
    report.summarize("final_loss_offline", offline.final_loss());
    report.summarize("final_loss_ratio", ota.final_loss() / offline.final_loss());
    report.summarize("max_loss_divergence", divergence);
    report.summarize("heatmap_median_nmse_ota", med_ota);
    report.summarize("heatmap_median_nmse_offline", med_off);
    report.summarize("heatmap_cells", cells_ota.len());
    report.summarize("rejected_rounds", ota.rounds.iter().filter(|r| r.rejected).count());
    report.summarize("retried_rounds", attempts.iter().filter(|&&a| a > 1).count());
    report.tables.push(heat);
    Ok(Runs { ota, offline, attempts, links: link_rows, report })
}

fn loss_table(name: &str, runs: &Runs) -> Table {
    let mut t = Table::new(
        name,
        &["t", "eta", "loss_ota", "loss_offline", "agg_nmse", "scale", "clipped", "attempts", "rejected"],
    );
    for ((a, b), att) in runs.ota.rounds.iter().zip(&runs.offline.rounds).zip(&runs.attempts) {
        t.push(vec![
            a.t.to_string(),
            fmt_f64(a.eta),
            fmt_f64(a.loss),
            fmt_f64(b.loss),
            fmt_opt(a.agg_nmse),
            fmt_f64(a.scale),
            a.clipped.to_string(),
            att.to_string(),
            a.rejected.to_string(),
        ]);
    }
    t
}

/// OTA training against the offline baseline, with the prediction-error map.
pub fn run_train(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    let runs = run_pair(config, false)?;
    let table = loss_table("train", &runs);
    let mut report = runs.report;
    report.tables.insert(0, table);
    report.trace("final_model", &runs.ota.model);
    Ok(report)
}

/// The full application run with per-round, per-sensor link telemetry.
pub fn run_e2e(config: &ExperimentConfig) -> Result<Report, HarnessError> {
    let runs = run_pair(config, true)?;
    let mut link = Table::new(
        "e2e",
        &[
            "t",
            "sensor",
            "sync_error",
            "peak",
            "to_step",
            "phi_hat",
            "tau_hat_samples",
            "dfr_single_hz",
            "dfr_mean_hz",
            "dfr_true_hz",
            "amplification",
            "deep_fades",
            "guard_warning",
            "recorrection",
        ],
    );
    for (t, sensors) in &runs.links {
        for s in sensors {
            link.push(vec![
                t.to_string(),
                s.sensor.to_string(),
                s.sync_error.to_string(),
                fmt_f64(s.peak),
                s.to_step.to_string(),
                fmt_f64(s.phi_hat),
                fmt_f64(s.tau_hat_samples),
                fmt_f64(s.dfr_single_hz),
                fmt_f64(s.dfr_mean_hz),
                fmt_f64(s.dfr_true_hz),
                fmt_f64(s.amplification),
                s.deep_fades.to_string(),
                s.guard_warning.to_string(),
                s.recorrection.to_string(),
            ]);
        }
    }
    let losses = loss_table("loss", &runs);
    let mut report = runs.report;
    report.tables.insert(0, link);
    report.tables.insert(1, losses);
    report.trace("final_model", &runs.ota.model);
    Ok(report)
}
