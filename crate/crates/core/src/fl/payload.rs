//! Mapping gradients onto PAM subcarrier amplitudes and back.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Nearest-rank percentile of `|g|`; `q` in `(0, 1]`.
pub fn abs_percentile(g: &[f64], q: f64) -> f64 {
    if g.is_empty() {
        return 0.0;
    }
    let mut a: Vec<f64> = g.iter().map(|v| v.abs()).collect();
    a.sort_by(f64::total_cmp);
    let rank = ((q * a.len() as f64).ceil() as usize).clamp(1, a.len());
    a[rank - 1]
}

/// Common scale for a round: `bound / max_k p_k`, or 1 when every gradient is zero.
pub fn agree_scale(local_percentiles: &[f64], amplitude_bound: f64) -> f64 {
    let m = local_percentiles.iter().copied().fold(0.0, f64::max);
    if m > 0.0 && m.is_finite() {
        amplitude_bound / m
    } else {
        1.0
    }
}

/// A gradient prepared for transmission.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientPayload {
    pub values: Vec<f64>,
    pub scale: f64,
    /// One vector of PAM amplitudes per OFDM symbol, zero-padded.
    pub chunks: Vec<Vec<f64>>,
    /// Entries that hit the `[-1, 1]` clip.
    pub clipped: usize,
}

/// Scales by `scale`, clips to `[-1, 1]` and splits into `per_symbol`-long chunks.
pub fn chunk_payload(g: &[f64], scale: f64, per_symbol: usize) -> Result<GradientPayload> {
    if per_symbol == 0 {
        return Err(Error::Config("a symbol must carry at least one value".into()));
    }
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!("gradient scale must be positive, got {scale}")));
    }
    let mut clipped = 0;
    let mut flat: Vec<f64> = g
        .iter()
        .map(|&v| {
            let s = v * scale;
            if s.abs() > 1.0 {
                clipped += 1;
            }
            s.clamp(-1.0, 1.0)
        })
        .collect();
    let padded = flat.len().div_ceil(per_symbol).max(1) * per_symbol;
    flat.resize(padded, 0.0);
    let chunks = flat.chunks(per_symbol).map(<[f64]>::to_vec).collect();
    Ok(GradientPayload { values: g.to_vec(), scale, chunks, clipped })
}

/// Drops the padding and undoes the scale.
pub fn dechunk_payload(aggregate: &[f64], len: usize, scale: f64) -> Result<Vec<f64>> {
    if aggregate.len() < len {
        return Err(Error::LengthMismatch { expected: len, got: aggregate.len() });
    }
    Ok(aggregate[..len].iter().map(|v| v / scale).collect())
}
