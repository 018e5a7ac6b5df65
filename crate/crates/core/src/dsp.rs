//! DFT plumbing and subcarrier index bookkeeping.
//!
//! Forward transforms are unscaled, inverse transforms carry the `1/N` factor.
//! Frequency-domain vectors handed around the crate are *centered*: position
//! `i` holds subcarrier `n = i - N/2`, so index 0 is `n = -N/2` and the last
//! entry is `n = N/2 - 1`.

use std::sync::Arc;

use num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::num::{cis, lit, Real};

/// Cached forward/inverse transforms of one length.
#[derive(Clone)]
pub struct Dft<T: Real> {
    len: usize,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Real> std::fmt::Debug for Dft<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Dft").field("len", &self.len).finish()
    }
}

impl<T: Real> Dft<T> {
    pub fn new(len: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { len, fwd: planner.plan_fft_forward(len), inv: planner.plan_fft_inverse(len) }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// In-place unscaled forward DFT, `X[k] = Σ x[m] e^{-j2πkm/N}`.
    pub fn forward(&self, buf: &mut [Complex<T>]) {
        assert_eq!(buf.len(), self.len);
        if self.len > 0 {
            self.fwd.process(buf);
        }
    }

    /// In-place inverse DFT with `1/N` scaling.
    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        assert_eq!(buf.len(), self.len);
        if self.len == 0 {
            return;
        }
        self.inv.process(buf);
        let scale = T::one() / lit(self.len as f64);
        for z in buf.iter_mut() {
            *z = *z * scale;
        }
    }
}

/// Signed subcarrier index of DFT bin `k` (bins `≥ N/2` map to negative indices).
#[inline]
pub fn bin_to_carrier(k: usize, n: usize) -> i64 {
    if k < n / 2 {
        k as i64
    } else {
        k as i64 - n as i64
    }
}

/// DFT bin of signed subcarrier `c`.
#[inline]
pub fn carrier_to_bin(c: i64, n: usize) -> usize {
    c.rem_euclid(n as i64) as usize
}

/// Signed subcarrier index of centered position `i`.
#[inline]
pub fn centered_carrier(i: usize, n: usize) -> i64 {
    i as i64 - (n / 2) as i64
}

/// Reorders DFT bins into centered order.
pub fn bins_to_centered<T: Copy>(bins: &[T]) -> Vec<T> {
    let n = bins.len();
    (0..n).map(|i| bins[carrier_to_bin(centered_carrier(i, n), n)]).collect()
}

/// Reorders a centered vector back into DFT bin order.
pub fn centered_to_bins<T: Copy + Default>(centered: &[T]) -> Vec<T> {
    let n = centered.len();
    let mut out = vec![T::default(); n];
    for (i, v) in centered.iter().enumerate() {
        out[carrier_to_bin(centered_carrier(i, n), n)] = *v;
    }
    out
}

/// Multiplies DFT bins by the all-pass ramp `e^{j2π·c·shift/N}` (signed carrier `c`).
///
/// A positive `shift` advances the block cyclically by `shift` samples.
pub fn apply_delay_ramp<T: Real>(bins: &mut [Complex<T>], shift_samples: T) {
    let n = bins.len();
    if n == 0 || shift_samples == T::zero() {
        return;
    }
    let step = (T::PI() + T::PI()) * shift_samples / lit(n as f64);
    for (k, z) in bins.iter_mut().enumerate() {
        let c: T = lit(bin_to_carrier(k, n) as f64);
        *z = *z * cis(step * c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_maps_are_inverse() {
        let n = 8;
        for k in 0..n {
            assert_eq!(carrier_to_bin(bin_to_carrier(k, n), n), k);
        }
        assert_eq!(bin_to_carrier(4, 8), -4);
        assert_eq!(centered_carrier(0, 8), -4);
        let v: Vec<i32> = (0..8).collect();
        assert_eq!(centered_to_bins(&bins_to_centered(&v)), v);
        assert_eq!(bins_to_centered(&v), vec![4, 5, 6, 7, 0, 1, 2, 3]);
    }

    #[test]
    fn forward_inverse_round_trip() {
        let dft = Dft::<f64>::new(16);
        let orig: Vec<Complex<f64>> = (0..16).map(|i| Complex::new(i as f64, -(i as f64) / 3.0)).collect();
        let mut buf = orig.clone();
        dft.forward(&mut buf);
        dft.inverse(&mut buf);
        for (a, b) in buf.iter().zip(&orig) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn integer_ramp_is_cyclic_advance() {
        let n = 16;
        let dft = Dft::<f64>::new(n);
        let mut x = vec![Complex::new(0.0, 0.0); n];
        x[5] = Complex::new(1.0, 0.0);
        dft.forward(&mut x);
        apply_delay_ramp(&mut x, 2.0);
        dft.inverse(&mut x);
        assert!((x[3].re - 1.0).abs() < 1e-12);
        assert!(x.iter().enumerate().filter(|(i, _)| *i != 3).all(|(_, z)| z.norm() < 1e-12));
    }
}
