//! Coarse CFO estimation and sequential residual-CFO tracking.

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::channel::{PhyConfig, SampleStream};
use crate::error::{Error, Result};
use crate::num::{to_f64, Real};
use crate::ofdm::OfdmSymbol;

/// Lag-product estimator over the long single-tone preamble.
///
/// Uses the products `r*[m]·r[m + l_span]` for `cp_len ≤ m < m_cfo_init`; the
/// first `cp_len` samples hold the multipath transient and are skipped.
pub fn coarse_cfo_estimate<T: Real>(r_init: &SampleStream<T>, config: &PhyConfig) -> Result<f64> {
    let needed = config.m_cfo_init + config.l_span;
    if r_init.len() < needed {
        return Err(Error::TooShort { needed, got: r_init.len() });
    }
    let r = &r_init.samples;
    let l = config.l_span;
    // f64 accumulation keeps a 1e6-term sum exact enough for f32 streams.
    let skip = config.cp_len.min(config.m_cfo_init - 1);
    let acc = r[skip..config.m_cfo_init].iter().zip(&r[skip + l..]).fold(Complex::new(0.0, 0.0), |acc, (a, b)| {
        let p = a.conj() * b;
        acc + Complex::new(to_f64(p.re), to_f64(p.im))
    });
    if acc.norm() == 0.0 {
        return Err(Error::ZeroPower);
    }
    Ok(acc.arg() / (2.0 * std::f64::consts::PI * config.ts() * l as f64))
}

/// One `(t_p, Δf̂_r, Δf̄_r)` row of the tracking history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackingRow {
    pub t_s: f64,
    pub single_hz: f64,
    pub mean_hz: f64,
}

/// Per-link CFO state: coarse correction plus the running residual mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CfoEstimate<T: Real> {
    pub coarse_hz: f64,
    pub residual_hz: f64,
    pub p_count: usize,
    pub last_t_s: Option<f64>,
    pub prev_pilot: Option<OfdmSymbol<T>>,
    pub history: Vec<TrackingRow>,
}

impl<T: Real> CfoEstimate<T> {
    pub fn new(coarse_hz: f64) -> Self {
        Self { coarse_hz, residual_hz: 0.0, p_count: 0, last_t_s: None, prev_pilot: None, history: Vec::new() }
    }

    /// Most recent single-shot estimate, if any.
    pub fn last_single_hz(&self) -> Option<f64> {
        self.history.last().map(|r| r.single_hz)
    }
}

/// Per-carrier phase rotation between two receptions of the same pilot.
///
/// Carriers where either reception is exactly zero (nulls) are skipped.
pub fn pilot_rotation_hz<T: Real>(prev: &OfdmSymbol<T>, now: &OfdmSymbol<T>, dt_s: f64) -> Result<f64> {
    if prev.len() != now.len() {
        return Err(Error::LengthMismatch { expected: prev.len(), got: now.len() });
    }
    let zero = Complex::new(T::zero(), T::zero());
    let (sum, count) = prev
        .freq
        .iter()
        .zip(&now.freq)
        .filter(|(a, b)| **a != zero && **b != zero)
        .fold((0.0, 0usize), |(s, c), (a, b)| (s + to_f64((b * a.conj()).arg()), c + 1));
    if count == 0 {
        return Err(Error::NoValidCarriers);
    }
    Ok(sum / (count as f64 * 2.0 * std::f64::consts::PI * dt_s))
}

/// Feeds one received pilot into the tracker.
///
/// The first pilot only primes the state. Later pilots produce a single-shot
/// estimate from the per-carrier angle of `r̃(t_p)/r̃(t_{p-1})` and update the
/// running mean.
pub fn track_residual_cfo<T: Real>(
    state: &CfoEstimate<T>,
    rx_pilot: &OfdmSymbol<T>,
    t_p: f64,
) -> Result<CfoEstimate<T>> {
    let mut next = state.clone();
    if let (Some(prev), Some(t_prev)) = (&state.prev_pilot, state.last_t_s) {
        let dt = t_p - t_prev;
        if !(dt > 0.0) {
            return Err(Error::Config(format!("pilot timestamps must increase (dt = {dt})")));
        }
        let single = pilot_rotation_hz(prev, rx_pilot, dt)?;
        let p = state.p_count + 1;
        next.residual_hz = state.residual_hz * (p - 1) as f64 / p as f64 + single / p as f64;
        next.p_count = p;
        next.history.push(TrackingRow { t_s: t_p, single_hz: single, mean_hz: next.residual_hz });
    }
    next.prev_pilot = Some(rx_pilot.clone());
    next.last_t_s = Some(t_p);
    Ok(next)
}

/// True when the residual rotates by more than half a cycle over `delta_t_s`.
pub fn needs_recorrection<T: Real>(state: &CfoEstimate<T>, delta_t_s: f64) -> bool {
    delta_t_s * state.residual_hz.abs() > 0.5
}

/// `‖est − truth‖² / ‖truth‖²`.
pub fn cfo_nmse(est: &[f64], truth: &[f64]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::LengthMismatch { expected: truth.len(), got: est.len() });
    }
    crate::num::nmse(est, truth).ok_or(Error::ZeroPower)
}
