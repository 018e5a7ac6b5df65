//! Federated training loop with a pluggable gradient aggregator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{Normalizer, RssDataset, RssMap, RssRecord};
use super::mlp::{global_update, local_gradient, MlpModel, TABLE_I_LAYERS};
use super::payload::{abs_percentile, agree_scale, chunk_payload, dechunk_payload};
use crate::channel::{PhyConfig, SensorLinkState};
use crate::error::{Error, Result};
use crate::num::{nmse, Real};
use crate::protocol::{OtaSession, ProtocolConfig, RoundOutcome, StageOneTrace};

/// How per-sample squared errors of a batch are combined into the local loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossReduction {
    Mean,
    Sum,
}

impl LossReduction {
    fn weight(self, batch: usize) -> f64 {
        match self {
            Self::Mean => 1.0,
            Self::Sum => batch as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub rounds: usize,
    pub batch: usize,
    pub loss_reduction: LossReduction,
    /// `η_t = eta_num / (eta_offset + t)`.
    pub eta_num: f64,
    pub eta_offset: f64,
    /// Largest PAM amplitude a scaled gradient entry is meant to reach.
    pub amplitude_bound: f64,
    pub percentile: f64,
    pub model_seed: u64,
    pub batch_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            rounds: 3000,
            batch: 200,
            loss_reduction: LossReduction::Sum,
            eta_num: 2.0,
            eta_offset: 2000.0,
            amplitude_bound: 1.0,
            percentile: 0.999,
            model_seed: 1,
            batch_seed: 2,
        }
    }
}

impl TrainConfig {
    pub fn eta(&self, t: usize) -> f64 {
        self.eta_num / (self.eta_offset + t as f64)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.eta_num > 0.0 && self.eta_offset > 0.0) {
            return Err(Error::Config("batch and step-size parameters must be positive".into()));
        }
        if !(self.amplitude_bound > 0.0 && self.amplitude_bound <= 1.0) {
            return Err(Error::Config(format!("amplitude_bound must lie in (0, 1], got {}", self.amplitude_bound)));
        }
        if !(self.percentile > 0.0 && self.percentile <= 1.0) {
            return Err(Error::Config(format!("percentile must lie in (0, 1], got {}", self.percentile)));
        }
        Ok(())
    }
}

/// Result of aggregating one round of gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregated {
    pub values: Vec<f64>,
    pub link: Option<RoundOutcome>,
}

/// Turns the sensors' local gradients into the AP's estimate of their sum.
pub trait Aggregator {
    fn aggregate(&mut self, grads: &[Vec<f64>], scale: f64) -> Result<Aggregated>;
}

/// Noiseless digital aggregation.
#[derive(Debug, Default, Clone, Copy)]
pub struct ExactAggregator;

impl Aggregator for ExactAggregator {
    fn aggregate(&mut self, grads: &[Vec<f64>], _scale: f64) -> Result<Aggregated> {
        let mut sum = vec![0.0; grads.first().map_or(0, Vec::len)];
        for g in grads {
            for (s, v) in sum.iter_mut().zip(g) {
                *s += v;
            }
        }
        Ok(Aggregated { values: sum, link: None })
    }
}

/// Over-the-air aggregation through a simulated OFDM session.
pub struct OtaAggregator<T: Real> {
    session: OtaSession<T>,
    per_symbol: usize,
    pub stage_one: StageOneTrace,
}

impl<T: Real> OtaAggregator<T> {
    /// Sets up a session sized for `n_params` values and runs its preamble and
    /// pre-equalization stage.
    pub fn new(
        phy: PhyConfig,
        proto: ProtocolConfig,
        links: Vec<SensorLinkState>,
        n_params: usize,
        seed: u64,
    ) -> Result<Self> {
        let per_symbol = phy.used_count();
        let proto = ProtocolConfig { ota_symbols: n_params.div_ceil(per_symbol).max(1), ..proto };
        let mut session = OtaSession::new(phy, proto, links, seed)?;
        session.initialize()?;
        let stage_one = session.pre_equalization_stage()?;
        Ok(Self { session, per_symbol, stage_one })
    }

    pub fn session(&self) -> &OtaSession<T> {
        &self.session
    }
}

impl<T: Real> Aggregator for OtaAggregator<T> {
    fn aggregate(&mut self, grads: &[Vec<f64>], scale: f64) -> Result<Aggregated> {
        let len = grads.first().map_or(0, Vec::len);
        let payloads = grads
            .iter()
            .map(|g| {
                let mut flat = chunk_payload(g, scale, self.per_symbol)?.chunks.concat();
                flat.resize(self.session.payload_len(), 0.0);
                Ok(flat)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = self.session.round(&payloads)?;
        let values = dechunk_payload(&out.aggregate, len, scale)?;
        Ok(Aggregated { values, link: Some(out) })
    }
}

/// Per-round training diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRound {
    pub t: usize,
    pub eta: f64,
    /// Training loss over all sensors' data after the update.
    pub loss: f64,
    pub scale: f64,
    pub clipped: usize,
    /// `‖ĝ − Σg‖²/‖Σg‖²` of the aggregate.
    pub agg_nmse: Option<f64>,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub rounds: Vec<TrainRound>,
    pub model: MlpModel,
}

impl TrainReport {
    pub fn final_loss(&self) -> f64 {
        self.rounds.last().map_or(f64::NAN, |r| r.loss)
    }
}

/// Batch indices drawn by sensor `k` in round `t`; identical for any aggregator.
pub fn batch_indices(cfg: &TrainConfig, t: usize, k: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.batch_seed);
    rng.set_stream(((t as u64) << 16) | k as u64);
    rand::seq::index::sample(&mut rng, n, cfg.batch.min(n)).into_vec()
}

/// Runs `cfg.rounds` rounds of gradient-descent training. `on_round` sees each
/// round's diagnostics and the link outcome, if any.
pub fn train<A, F>(datasets: &[RssDataset], cfg: &TrainConfig, agg: &mut A, mut on_round: F) -> Result<TrainReport>
where
    A: Aggregator + ?Sized,
    F: FnMut(&TrainRound, Option<&RoundOutcome>),
{
    cfg.validate()?;
    if datasets.iter().any(RssDataset::is_empty) || datasets.is_empty() {
        return Err(Error::Config("every sensor needs training data".into()));
    }
    let all: Vec<RssRecord> = datasets.iter().flat_map(|d| d.records.iter().copied()).collect();
    let mut model = MlpModel::init(&TABLE_I_LAYERS, cfg.model_seed);
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for t in 0..cfg.rounds {
        let grads = datasets
            .iter()
            .enumerate()
            .map(|(k, d)| {
                let batch = batch_indices(cfg, t, k, d.len());
                local_gradient(&model, &d.records, &batch, d.epsilon * cfg.loss_reduction.weight(batch.len()))
            })
            .collect::<Result<Vec<_>>>()?;
        let percentiles: Vec<f64> = grads.iter().map(|g| abs_percentile(g, cfg.percentile)).collect();
        let scale = agree_scale(&percentiles, cfg.amplitude_bound);
        let clipped = grads.iter().flatten().filter(|v| (*v * scale).abs() > 1.0).count();
        let out = agg.aggregate(&grads, scale)?;
        let truth = ExactAggregator.aggregate(&grads, scale)?.values;
        let eta = cfg.eta(t);
        let rejected = global_update(&mut model, &out.values, eta).is_err();
        let round = TrainRound {
            t,
            eta,
            loss: model.loss(&all),
            scale,
            clipped,
            agg_nmse: nmse(&out.values, &truth),
            rejected,
        };
        on_round(&round, out.link.as_ref());
        rounds.push(round);
    }
    Ok(TrainReport { rounds, model })
}

/// One evaluation point of the prediction-error map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeatCell {
    pub x_m: f64,
    pub y_m: f64,
    pub truth_dbm: f64,
    pub pred_dbm: f64,
    /// `(pred − truth)² / truth²` on the dBm values.
    pub nmse: f64,
}

/// Evaluates the model on a square grid over the measurable region.
pub fn heatmap(model: &MlpModel, map: &RssMap, norm: &Normalizer, step_m: f64) -> Vec<HeatCell> {
    let r = map.config.radius_m;
    let n = (2.0 * r / step_m).floor() as i64;
    let mut cells = Vec::new();
    for iy in 0..=n {
        for ix in 0..=n {
            let p = [-r + ix as f64 * step_m, -r + iy as f64 * step_m];
            if !map.measurable(p) {
                continue;
            }
            let truth = map.rss_dbm(p);
            let pred = norm.rss_dbm(model.forward(&norm.position(p)));
            cells.push(HeatCell {
                x_m: p[0],
                y_m: p[1],
                truth_dbm: truth,
                pred_dbm: pred,
                nmse: (pred - truth).powi(2) / truth.powi(2),
            });
        }
    }
    cells
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}
