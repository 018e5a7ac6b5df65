//! Fully connected ReLU network with hand-written backpropagation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::RssRecord;
use crate::error::{Error, Result};

/// Layer widths of the RSS predictor: 2 → 20 → 20 → 1.
pub const TABLE_I_LAYERS: [usize; 4] = [2, 20, 20, 1];

/// Parameters are flattened layer by layer, each as the row-major `out × in`
/// weight matrix followed by the `out` biases. Hidden layers use ReLU, the
/// output layer is affine.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layers: Vec<usize>,
    pub w: Vec<f64>,
}

impl MlpModel {
    pub fn zeros(layers: &[usize]) -> Self {
        assert!(layers.len() >= 2 && layers[layers.len() - 1] == 1, "scalar-output network expected");
        let n = layers.windows(2).map(|p| p[0] * p[1] + p[1]).sum();
        Self { layers: layers.to_vec(), w: vec![0.0; n] }
    }

    /// Uniform `±√(6/(fan_in + fan_out))` weights, zero biases.
    pub fn init(layers: &[usize], seed: u64) -> Self {
        let mut m = Self::zeros(layers);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut off = 0;
        for p in layers.windows(2) {
            let a = (6.0 / (p[0] + p[1]) as f64).sqrt();
            for v in &mut m.w[off..off + p[0] * p[1]] {
                *v = rng.random_range(-a..a);
            }
            off += p[0] * p[1] + p[1];
        }
        m
    }

    pub fn table_i(seed: u64) -> Self {
        Self::init(&TABLE_I_LAYERS, seed)
    }

    pub fn n_params(&self) -> usize {
        self.w.len()
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        self.activations(x).last().expect("output layer")[0]
    }

    /// On/off state of every hidden ReLU for input `x`, first hidden layer first.
    pub fn relu_pattern(&self, x: &[f64]) -> Vec<bool> {
        let acts = self.activations(x);
        acts[1..acts.len() - 1].iter().flatten().map(|&a| a > 0.0).collect()
    }

    /// Post-activation values of every layer, input first.
    fn activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        let last = self.layers.len() - 2;
        for (l, p) in self.layers.windows(2).enumerate() {
            let (fi, fo) = (p[0], p[1]);
            let input = &acts[l];
            let wmat = &self.w[off..off + fi * fo];
            let bias = &self.w[off + fi * fo..off + fi * fo + fo];
            let out: Vec<f64> = (0..fo)
                .map(|o| {
                    let z = bias[o] + (0..fi).map(|i| wmat[o * fi + i] * input[i]).sum::<f64>();
                    if l < last {
                        z.max(0.0)
                    } else {
                        z
                    }
                })
                .collect();
            acts.push(out);
            off += fi * fo + fo;
        }
        acts
    }

    /// Mean squared error over `batch` and its gradient.
    pub fn loss_and_grad(&self, records: &[RssRecord], batch: &[usize]) -> (f64, Vec<f64>) {
        let mut grad = vec![0.0; self.w.len()];
        let mut loss = 0.0;
        let scale = 1.0 / batch.len() as f64;
        let offsets = self.offsets();
        for &b in batch {
            let r = &records[b];
            let acts = self.activations(&r.input());
            let err = acts.last().expect("output")[0] - r.rss_norm;
            loss += err * err * scale;
            let mut delta = vec![2.0 * err * scale];
            for l in (0..self.layers.len() - 1).rev() {
                let (fi, fo) = (self.layers[l], self.layers[l + 1]);
                let off = offsets[l];
                let input = &acts[l];
                for o in 0..fo {
                    for i in 0..fi {
                        grad[off + o * fi + i] += delta[o] * input[i];
                    }
                    grad[off + fi * fo + o] += delta[o];
                }
                if l > 0 {
                    delta = (0..fi)
                        .map(|i| {
                            if input[i] > 0.0 {
                                (0..fo).map(|o| delta[o] * self.w[off + o * fi + i]).sum()
                            } else {
                                0.0
                            }
                        })
                        .collect();
                }
            }
        }
        (loss, grad)
    }

    pub fn loss(&self, records: &[RssRecord]) -> f64 {
        records.iter().map(|r| (self.forward(&r.input()) - r.rss_norm).powi(2)).sum::<f64>() / records.len() as f64
    }

    fn offsets(&self) -> Vec<usize> {
        self.layers
            .windows(2)
            .scan(0, |off, p| {
                let o = *off;
                *off += p[0] * p[1] + p[1];
                Some(o)
            })
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().all(|v| v.is_finite())
    }
}

/// Backprop compared with central finite differences of the mean squared error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    /// Largest `|backprop − difference| / max(|backprop|, |difference|, floor)`.
    pub max_rel_error: f64,
    /// Parameters whose step had to shrink to keep every ReLU on the same side.
    pub refined: usize,
    /// Parameters sitting on a ReLU kink at every tried step; not compared.
    pub skipped: usize,
}

/// Checks [`MlpModel::loss_and_grad`] on all of `records` parameter by parameter.
///
/// The step starts at `h` and is divided by 4, up to 8 times, while `w ± step`
/// flips any hidden unit on any record: the loss is only smooth between kinks.
/// Differences are accumulated per record as `(r₊ − r₋)(r₊ + r₋)` rather than
/// by subtracting two loss totals.
pub fn gradient_check(model: &MlpModel, records: &[RssRecord], h: f64, floor: f64) -> GradientCheck {
    let batch: Vec<usize> = (0..records.len()).collect();
    let (_, grad) = model.loss_and_grad(records, &batch);
    let base: Vec<Vec<bool>> = records.iter().map(|r| model.relu_pattern(&r.input())).collect();
    let mut out = GradientCheck { max_rel_error: 0.0, refined: 0, skipped: 0 };
    for (i, &g) in grad.iter().enumerate() {
        let mut step = h;
        let mut fd = None;
        for attempt in 0..=8 {
            let (mut plus, mut minus) = (model.clone(), model.clone());
            plus.w[i] += step;
            minus.w[i] -= step;
            let smooth = records
                .iter()
                .zip(&base)
                .all(|(r, b)| plus.relu_pattern(&r.input()) == *b && minus.relu_pattern(&r.input()) == *b);
            if smooth {
                let diff: f64 = records
                    .iter()
                    .map(|r| {
                        let a = plus.forward(&r.input()) - r.rss_norm;
                        let b = minus.forward(&r.input()) - r.rss_norm;
                        (a - b) * (a + b)
                    })
                    .sum();
                fd = Some(diff / records.len() as f64 / (2.0 * step));
                out.refined += usize::from(attempt > 0);
                break;
            }
            step /= 4.0;
        }
        match fd {
            Some(fd) => {
                let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(floor);
                out.max_rel_error = out.max_rel_error.max(rel);
            }
            None => out.skipped += 1,
        }
    }
    out
}

/// `ε_k·∇ MSE` over the selected batch.
pub fn local_gradient(model: &MlpModel, records: &[RssRecord], batch: &[usize], epsilon: f64) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Config("gradient batch is empty".into()));
    }
    let (_, mut g) = model.loss_and_grad(records, batch);
    g.iter_mut().for_each(|v| *v *= epsilon);
    Ok(g)
}

/// `w ← w − η·ĝ`. A non-finite aggregate leaves the model untouched.
pub fn global_update(model: &mut MlpModel, aggregate: &[f64], eta: f64) -> Result<()> {
    if aggregate.len() != model.w.len() {
        return Err(Error::LengthMismatch { expected: model.w.len(), got: aggregate.len() });
    }
    if !aggregate.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite);
    }
    for (w, g) in model.w.iter_mut().zip(aggregate) {
        *w -= eta * g;
    }
    Ok(())
}
