//! Ground-truth impairment model.
//!
//! Everything a receiver must *estimate* lives here as known truth: multipath
//! taps, carrier frequency offset, timing offsets and thermal noise. Receivers
//! never call [`effective_channel_oracle`]; tests use it to check estimators.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dsp::{apply_delay_ramp, centered_carrier, Dft};
use crate::error::{Error, Result};
use crate::num::{cis, lit, mean_power, Real};
use crate::ofdm::{ChannelKind, FreqChannelEstimate};

/// Every PHY constant of the simulated link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhyConfig {
    /// Subcarrier count `N`.
    pub n_fft: usize,
    /// Cyclic prefix length `L`.
    pub cp_len: usize,
    /// Baseband sample rate in Hz.
    pub fs_hz: f64,
    /// Frame-timing sequence length (even).
    pub m_ft: usize,
    /// Length of the single-tone section of the initialization preamble.
    pub m_cfo_init: usize,
    /// Length of the single-tone section of a digital frame.
    pub m_cfo_frame: usize,
    /// Active subcarrier of the single-tone CFO section.
    pub n_cfo_tone: i64,
    /// Lag of the coarse CFO correlator.
    pub l_span: usize,
    /// Frame-detection threshold; `None` selects `(m_ft - 2) / 2`.
    pub gamma_th: Option<f64>,
    /// OFDM symbols per frame, used by the small-residual-CFO guard.
    pub kappa: usize,
    /// Receivers start their DFT window this many samples before the end of the
    /// cyclic prefix so that timing offsets of either sign stay inside it.
    pub window_backoff: usize,
    /// Null the DC carrier and `guard_carriers` carriers at each band edge.
    pub null_guards: bool,
    pub guard_carriers: usize,
}

impl Default for PhyConfig {
    fn default() -> Self {
        let n_fft = 256;
        let cp_len = 32;
        Self {
            n_fft,
            cp_len,
            fs_hz: 15.36e6,
            m_ft: 128,
            m_cfo_init: 1_000_000,
            m_cfo_frame: 2 * (n_fft + cp_len),
            n_cfo_tone: 1,
            l_span: 1024,
            gamma_th: None,
            kappa: 4,
            window_backoff: 16,
            null_guards: false,
            guard_carriers: 8,
        }
    }
}

impl PhyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n_fft < 4 || !self.n_fft.is_multiple_of(2) {
            return bad(format!("n_fft must be even and >= 4, got {}", self.n_fft));
        }
        if self.cp_len >= self.n_fft {
            return bad(format!("cp_len {} must be < n_fft {}", self.cp_len, self.n_fft));
        }
        if !(self.fs_hz.is_finite() && self.fs_hz > 0.0) {
            return bad(format!("fs_hz must be positive, got {}", self.fs_hz));
        }
        if self.m_ft < 4 || !self.m_ft.is_multiple_of(2) {
            return bad(format!("m_ft must be even and >= 4, got {}", self.m_ft));
        }
        if self.m_cfo_init <= self.n_fft {
            return bad(format!("m_cfo_init {} must exceed n_fft {}", self.m_cfo_init, self.n_fft));
        }
        if self.m_cfo_frame <= self.n_fft {
            return bad(format!("m_cfo_frame {} must exceed n_fft {}", self.m_cfo_frame, self.n_fft));
        }
        let half = (self.n_fft / 2) as i64;
        if self.n_cfo_tone < -half || self.n_cfo_tone >= half {
            return bad(format!("n_cfo_tone {} outside the band", self.n_cfo_tone));
        }
        if self.l_span == 0 {
            return bad("l_span must be positive".into());
        }
        let g = self.gamma_th();
        if !(g > 0.0 && g <= (self.m_ft - 2) as f64) {
            return bad(format!("gamma_th {g} must lie in (0, m_ft - 2]"));
        }
        if self.kappa == 0 {
            return bad("kappa must be positive".into());
        }
        if self.window_backoff > self.cp_len {
            return bad(format!("window_backoff {} exceeds cp_len {}", self.window_backoff, self.cp_len));
        }
        if self.null_guards && 2 * self.guard_carriers + 1 >= self.n_fft {
            return bad("guard carriers leave no usable carriers".into());
        }
        Ok(())
    }

    pub fn ts(&self) -> f64 {
        1.0 / self.fs_hz
    }

    pub fn gamma_th(&self) -> f64 {
        self.gamma_th.unwrap_or((self.m_ft - 2) as f64 / 2.0)
    }

    /// Samples in one cyclic-prefixed OFDM symbol.
    pub fn symbol_len(&self) -> usize {
        self.n_fft + self.cp_len
    }

    /// Fraction of an OFDM symbol that carries payload, `(N - L) / N`.
    pub fn payload_fraction(&self) -> f64 {
        (self.n_fft - self.cp_len) as f64 / self.n_fft as f64
    }

    /// Whether centered position `i` is a used carrier.
    pub fn carrier_used(&self, i: usize) -> bool {
        if !self.null_guards {
            return true;
        }
        let c = centered_carrier(i, self.n_fft);
        let half = (self.n_fft / 2) as i64;
        let g = self.guard_carriers as i64;
        c != 0 && c >= -half + g && c < half - g
    }

    /// Centered positions of the used carriers, ascending.
    pub fn used_positions(&self) -> Vec<usize> {
        (0..self.n_fft).filter(|&i| self.carrier_used(i)).collect()
    }

    pub fn used_count(&self) -> usize {
        self.used_positions().len()
    }

    /// Coarse CFO ambiguity half-width `1 / (2·T_s·L_SPAN)` in Hz.
    pub fn coarse_cfo_range_hz(&self) -> f64 {
        self.fs_hz / (2.0 * self.l_span as f64)
    }
}

/// One propagation path.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tap {
    pub gain: Complex<f64>,
    pub delay_s: f64,
}

/// Static tapped-delay-line channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultipathProfile {
    pub taps: Vec<Tap>,
}

impl MultipathProfile {
    /// Ideal single-path channel.
    pub fn identity() -> Self {
        Self::single(Complex::new(1.0, 0.0))
    }

    pub fn single(gain: Complex<f64>) -> Self {
        Self { taps: vec![Tap { gain, delay_s: 0.0 }] }
    }

    /// Exponentially decaying power profile with the given path phases, normalized to unit power.
    pub fn exponential(delays_samples: &[usize], decay_samples: f64, phases: &[f64], config: &PhyConfig) -> Self {
        assert_eq!(delays_samples.len(), phases.len());
        let powers: Vec<f64> = delays_samples.iter().map(|&d| (-(d as f64) / decay_samples).exp()).collect();
        let total: f64 = powers.iter().sum();
        let taps = delays_samples
            .iter()
            .zip(&powers)
            .zip(phases)
            .map(|((&d, &p), &ph)| Tap {
                gain: Complex::from_polar((p / total).sqrt(), ph),
                delay_s: d as f64 * config.ts(),
            })
            .collect();
        Self { taps }
    }

    pub fn p_count(&self) -> usize {
        self.taps.len()
    }

    pub fn power(&self) -> f64 {
        self.taps.iter().map(|t| t.gain.norm_sqr()).sum()
    }

    /// Integer sample delay of every tap. Fails unless the profile is valid.
    pub fn sample_delays(&self, config: &PhyConfig) -> Result<Vec<usize>> {
        self.validate(config)?;
        Ok(self.taps.iter().map(|t| (t.delay_s * config.fs_hz).round() as usize).collect())
    }

    pub fn validate(&self, config: &PhyConfig) -> Result<()> {
        if self.taps.is_empty() {
            return Err(Error::Profile("no taps".into()));
        }
        let mut prev: Option<f64> = None;
        for t in &self.taps {
            if !(t.delay_s.is_finite() && t.delay_s >= 0.0) {
                return Err(Error::Profile(format!("negative or non-finite delay {}", t.delay_s)));
            }
            if let Some(p) = prev {
                if t.delay_s <= p {
                    return Err(Error::Profile("delays must be strictly increasing".into()));
                }
            }
            prev = Some(t.delay_s);
            let samples = t.delay_s * config.fs_hz;
            if (samples - samples.round()).abs() > 1e-6 {
                return Err(Error::Profile(format!("delay {samples} samples is not on the sample grid")));
            }
            if samples.round() >= config.cp_len as f64 {
                return Err(Error::Profile(format!(
                    "delay of {} samples is not absorbed by a {}-sample cyclic prefix",
                    samples.round(),
                    config.cp_len
                )));
            }
            if !(t.gain.re.is_finite() && t.gain.im.is_finite()) {
                return Err(Error::Profile("non-finite gain".into()));
            }
        }
        let p = self.power();
        if !(p.is_finite() && p > 0.0) {
            return Err(Error::Profile(format!("total power {p} must be finite and positive")));
        }
        Ok(())
    }
}

/// Per-sensor ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorLinkState {
    pub profile: MultipathProfile,
    /// Sensor oscillator offset relative to the AP.
    pub cfo_hz: f64,
    /// Downlink sampling offset past the detected frame start.
    pub to_dl_s: f64,
    /// Uplink sampling offset of this sensor's signal at the AP.
    pub to_ul_s: f64,
    /// Local clock; advances by exact sample counts.
    pub clock_s: f64,
}

impl SensorLinkState {
    pub fn ideal() -> Self {
        Self { profile: MultipathProfile::identity(), cfo_hz: 0.0, to_dl_s: 0.0, to_ul_s: 0.0, clock_s: 0.0 }
    }

    pub fn validate(&self, config: &PhyConfig, cfo_bound_hz: f64) -> Result<()> {
        self.profile.validate(config)?;
        if !(self.cfo_hz.is_finite() && self.cfo_hz.abs() <= cfo_bound_hz) {
            return Err(Error::Config(format!("cfo {} Hz exceeds the oscillator bound {cfo_bound_hz}", self.cfo_hz)));
        }
        let limit = config.cp_len as f64 * config.ts();
        for to in [self.to_dl_s, self.to_ul_s] {
            if !(to.abs() < limit) {
                return Err(Error::TimingOffsetTooLarge { offset_samples: to * config.fs_hz, cp_len: config.cp_len });
            }
        }
        Ok(())
    }
}

/// Distribution the per-sensor impairments are drawn from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImpairmentConfig {
    pub enabled: bool,
    pub cfo_max_hz: f64,
    pub to_max_samples: f64,
    pub tap_delays_samples: Vec<usize>,
    pub tap_decay_samples: f64,
}

impl Default for ImpairmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            cfo_max_hz: 2000.0,
            to_max_samples: 8.0,
            tap_delays_samples: vec![0, 2, 5],
            tap_decay_samples: 2.0,
        }
    }
}

impl ImpairmentConfig {
    pub fn disabled() -> Self {
        Self { enabled: false, ..Self::default() }
    }

    pub fn validate(&self, phy: &PhyConfig) -> Result<()> {
        if !(self.cfo_max_hz >= 0.0 && self.cfo_max_hz <= phy.coarse_cfo_range_hz()) {
            return Err(Error::Config(format!(
                "cfo_max_hz {} outside the coarse estimator range ±{}",
                self.cfo_max_hz,
                phy.coarse_cfo_range_hz()
            )));
        }
        let max_delay = self.tap_delays_samples.iter().copied().max().unwrap_or(0) as f64;
        let backoff = phy.window_backoff as f64;
        // Receiver windows start at `-backoff + offset ± 1` samples (detection jitter)
        // relative to the end of the prefix and must stay clear of the multipath tail.
        if !(self.to_max_samples >= 0.0
            && backoff >= self.to_max_samples + 1.0
            && backoff + self.to_max_samples + 1.0 + max_delay <= phy.cp_len as f64)
        {
            return Err(Error::Config(format!(
                "to_max_samples {} with window_backoff {} and delay spread {} does not fit the cyclic prefix",
                self.to_max_samples, backoff, max_delay
            )));
        }
        if self.tap_delays_samples.is_empty() || !(self.tap_decay_samples > 0.0) {
            return Err(Error::Config("tap profile needs at least one delay and a positive decay".into()));
        }
        Ok(())
    }

    /// Draws one sensor's ground truth.
    pub fn draw<R: Rng + ?Sized>(&self, config: &PhyConfig, rng: &mut R) -> SensorLinkState {
        if !self.enabled {
            return SensorLinkState::ideal();
        }
        let phases: Vec<f64> = self
            .tap_delays_samples
            .iter()
            .map(|_| rng.random_range(-std::f64::consts::PI..std::f64::consts::PI))
            .collect();
        let profile = MultipathProfile::exponential(&self.tap_delays_samples, self.tap_decay_samples, &phases, config);
        let cfo_hz = rng.random_range(-self.cfo_max_hz..=self.cfo_max_hz);
        let to = self.to_max_samples * config.ts();
        let to_dl_s = rng.random_range(-to..=to);
        let to_ul_s = rng.random_range(-to..=to);
        SensorLinkState { profile, cfo_hz, to_dl_s, to_ul_s, clock_s: 0.0 }
    }
}

/// Complex baseband samples with the timestamp of the first one.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleStream<T: Real> {
    pub samples: Vec<Complex<T>>,
    pub t0_s: f64,
}

impl<T: Real> SampleStream<T> {
    pub fn new(samples: Vec<Complex<T>>, t0_s: f64) -> Self {
        Self { samples, t0_s }
    }

    pub fn zeros(len: usize, t0_s: f64) -> Self {
        Self::new(vec![Complex::new(T::zero(), T::zero()); len], t0_s)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.samples.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    pub fn power(&self) -> T {
        mean_power(&self.samples)
    }

    /// Adds `other` sample-by-sample, growing to the longer length. Timestamps must agree.
    pub fn accumulate(&mut self, other: &SampleStream<T>) {
        if other.len() > self.len() {
            self.samples.resize(other.len(), Complex::new(T::zero(), T::zero()));
        }
        for (a, b) in self.samples.iter_mut().zip(&other.samples) {
            *a = *a + *b;
        }
    }
}

/// Linear convolution with the tap response.
pub fn apply_multipath<T: Real>(
    x: &SampleStream<T>,
    profile: &MultipathProfile,
    config: &PhyConfig,
) -> Result<SampleStream<T>> {
    let delays = profile.sample_delays(config)?;
    let max_delay = delays.iter().copied().max().unwrap_or(0);
    let mut out = vec![Complex::new(T::zero(), T::zero()); x.len() + max_delay];
    for (tap, &d) in profile.taps.iter().zip(&delays) {
        let g = Complex::new(lit::<T>(tap.gain.re), lit::<T>(tap.gain.im));
        for (m, &s) in x.samples.iter().enumerate() {
            out[m + d] = out[m + d] + g * s;
        }
    }
    Ok(SampleStream::new(out, x.t0_s))
}

/// Rotates sample `m` by `e^{j2π·cfo·(t0 + m·T_s)}`.
pub fn apply_cfo<T: Real>(x: &SampleStream<T>, cfo_hz: f64, fs_hz: f64) -> SampleStream<T> {
    let mut out = x.clone();
    rotate_in_place(&mut out.samples, cfo_hz, x.t0_s, fs_hz);
    out
}

/// In-place version of [`apply_cfo`] for a buffer whose first sample is at `t0_s`.
pub fn rotate_in_place<T: Real>(samples: &mut [Complex<T>], cfo_hz: f64, t0_s: f64, fs_hz: f64) {
    if cfo_hz == 0.0 {
        return;
    }
    let two_pi = 2.0 * std::f64::consts::PI;
    // Split the phase into the block start and the in-block offset to keep precision on long streams.
    let base = (two_pi * cfo_hz * t0_s).rem_euclid(two_pi);
    let step = two_pi * cfo_hz / fs_hz;
    for (m, z) in samples.iter_mut().enumerate() {
        let phase = (base + step * m as f64).rem_euclid(two_pi);
        *z = *z * cis(lit::<T>(phase));
    }
}

/// Splits an offset in seconds into whole samples (toward zero) and the fractional remainder.
pub fn split_offset(dt_s: f64, fs_hz: f64) -> (i64, f64) {
    let samples = dt_s * fs_hz;
    let whole = samples.trunc();
    (whole as i64, samples - whole)
}

/// Receiver sampling offset of `dt_s` seconds.
///
/// A positive offset means the receiver samples late: the whole part advances
/// the stream by that many samples (zero-filled at the end) and the fractional
/// part is a cyclic all-pass ramp `e^{j2πn·frac/M}` over the `M`-sample block.
/// On an `N`-sample block this multiplies subcarrier `n` by
/// `e^{j2πn·f_s·dt/N}` exactly.
pub fn apply_timing_offset<T: Real>(x: &SampleStream<T>, dt_s: f64, config: &PhyConfig) -> Result<SampleStream<T>> {
    let samples = dt_s * config.fs_hz;
    if !(samples.abs() < config.cp_len as f64) {
        return Err(Error::TimingOffsetTooLarge { offset_samples: samples, cp_len: config.cp_len });
    }
    let (whole, frac) = split_offset(dt_s, config.fs_hz);
    let zero = Complex::new(T::zero(), T::zero());
    let len = x.len();
    let mut out: Vec<Complex<T>> = (0..len as i64)
        .map(|m| {
            let src = m + whole;
            if src >= 0 && (src as usize) < len {
                x.samples[src as usize]
            } else {
                zero
            }
        })
        .collect();
    if frac != 0.0 && len > 0 {
        let dft = Dft::new(len);
        dft.forward(&mut out);
        apply_delay_ramp(&mut out, lit(frac));
        dft.inverse(&mut out);
    }
    Ok(SampleStream::new(out, x.t0_s))
}

/// Adds circular complex Gaussian noise of total variance `noise_var` per sample.
pub fn add_noise<T: Real, R: Rng + ?Sized>(samples: &mut [Complex<T>], noise_var: f64, rng: &mut R) {
    if noise_var <= 0.0 {
        return;
    }
    let sigma = (noise_var / 2.0).sqrt();
    for z in samples.iter_mut() {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        *z = *z + Complex::new(lit::<T>(sigma * re), lit::<T>(sigma * im));
    }
}

/// Adds AWGN at `snr_db` relative to the measured power of `x`. `f64::INFINITY` disables noise.
pub fn add_awgn<T: Real>(x: &SampleStream<T>, snr_db: f64, rng_seed: u64) -> Result<SampleStream<T>> {
    if snr_db == f64::INFINITY {
        return Ok(x.clone());
    }
    let p = crate::num::to_f64(x.power());
    if p == 0.0 {
        return Err(Error::ZeroPower);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = x.clone();
    add_noise(&mut out.samples, p / db_to_linear(snr_db), &mut rng);
    Ok(out)
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

/// Link direction seen from the AP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    Downlink,
    Uplink,
}

/// Multipath frequency response `ã[n] = Σ_p a_p e^{-j2πn·f_s·τ_p/N}` in centered order.
pub fn multipath_response<T: Real>(profile: &MultipathProfile, config: &PhyConfig) -> Vec<Complex<T>> {
    let n = config.n_fft;
    let two_pi = 2.0 * std::f64::consts::PI;
    (0..n)
        .map(|i| {
            let c = centered_carrier(i, n) as f64;
            let sum = profile.taps.iter().fold(Complex::new(0.0f64, 0.0), |acc, tap| {
                acc + tap.gain * Complex::from_polar(1.0, -two_pi * c * config.fs_hz * tap.delay_s / n as f64)
            });
            Complex::new(lit(sum.re), lit(sum.im))
        })
        .collect()
}

/// Effective channel of one sensor at time `t_s`:
/// `e^{j2π(±Δf_r·t + n·f_s·ΔT/N)}·ã[n]`, `+` on the downlink and `−` on the uplink.
pub fn effective_channel_oracle<T: Real>(
    state: &SensorLinkState,
    direction: Direction,
    t_s: f64,
    residual_cfo_hz: f64,
    config: &PhyConfig,
) -> FreqChannelEstimate<T> {
    let (sign, to) = match direction {
        Direction::Downlink => (1.0, state.to_dl_s),
        Direction::Uplink => (-1.0, state.to_ul_s),
    };
    effective_channel(&state.profile, sign * residual_cfo_hz * t_s, to, config, direction, t_s)
}

/// Shared body of the oracle: `e^{j2π(cfo_cycles + n·f_s·to/N)}·ã[n]`.
pub(crate) fn effective_channel<T: Real>(
    profile: &MultipathProfile,
    cfo_cycles: f64,
    to_s: f64,
    config: &PhyConfig,
    direction: Direction,
    t_s: f64,
) -> FreqChannelEstimate<T> {
    let n = config.n_fft;
    let two_pi = 2.0 * std::f64::consts::PI;
    let a = multipath_response::<f64>(profile, config);
    let h = a
        .iter()
        .enumerate()
        .map(|(i, ai)| {
            let c = centered_carrier(i, n) as f64;
            let z = ai * Complex::from_polar(1.0, two_pi * (cfo_cycles + c * config.fs_hz * to_s / n as f64));
            Complex::new(lit(z.re), lit(z.im))
        })
        .collect();
    let kind = match direction {
        Direction::Downlink => ChannelKind::Downlink,
        Direction::Uplink => ChannelKind::Uplink,
    };
    FreqChannelEstimate::new(h, (0..n).map(|i| config.carrier_used(i)).collect(), t_s, kind)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::bins_to_centered;

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    fn stream(v: Vec<Complex<f64>>) -> SampleStream<f64> {
        SampleStream::new(v, 0.0)
    }

    fn impulse(len: usize, at: usize) -> SampleStream<f64> {
        let mut v = vec![c(0.0, 0.0); len];
        v[at] = c(1.0, 0.0);
        stream(v)
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = PhyConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.gamma_th(), 63.0);
        assert_eq!(cfg.payload_fraction(), 224.0 / 256.0);
        ImpairmentConfig::default().validate(&cfg).unwrap();
    }

    #[test]
    fn config_rejects_odd_ft_and_short_cfo() {
        let cfg = PhyConfig { m_ft: 127, ..PhyConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = PhyConfig { m_cfo_init: 256, ..PhyConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = PhyConfig { cp_len: 256, ..PhyConfig::default() };
        assert!(cfg.validate().is_err());
        let cfg = PhyConfig { gamma_th: Some(200.0), ..PhyConfig::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn identity_tap_leaves_stream_unchanged() {
        let cfg = PhyConfig::default();
        let x = stream(vec![c(1.0, 2.0), c(-0.5, 0.25), c(3.0, 0.0)]);
        let y = apply_multipath(&x, &MultipathProfile::identity(), &cfg).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn scalar_gain_tap() {
        let cfg = PhyConfig::default();
        let y = apply_multipath(&impulse(2, 0), &MultipathProfile::single(c(0.0, 0.5)), &cfg).unwrap();
        assert_eq!(y.samples, vec![c(0.0, 0.5), c(0.0, 0.0)]);
    }

    #[test]
    fn two_tap_impulse_response() {
        let cfg = PhyConfig::default();
        let profile = MultipathProfile {
            taps: vec![Tap { gain: c(1.0, 0.0), delay_s: 0.0 }, Tap { gain: c(0.5, 0.0), delay_s: 2.0 * cfg.ts() }],
        };
        let y = apply_multipath(&impulse(1, 0), &profile, &cfg).unwrap();
        assert_eq!(y.samples, vec![c(1.0, 0.0), c(0.0, 0.0), c(0.5, 0.0)]);
    }

    #[test]
    fn multipath_rejects_delay_beyond_cp() {
        let cfg = PhyConfig::default();
        let profile = MultipathProfile { taps: vec![Tap { gain: c(1.0, 0.0), delay_s: 32.0 * cfg.ts() }] };
        assert!(matches!(apply_multipath(&impulse(4, 0), &profile, &cfg), Err(Error::Profile(_))));
        let unsorted = MultipathProfile {
            taps: vec![Tap { gain: c(1.0, 0.0), delay_s: 2.0 * cfg.ts() }, Tap { gain: c(1.0, 0.0), delay_s: 0.0 }],
        };
        assert!(unsorted.validate(&cfg).is_err());
    }

    #[test]
    fn cfo_quarter_rate_tone() {
        let fs = 8.0;
        let x = stream(vec![c(1.0, 0.0); 5]);
        let y = apply_cfo(&x, fs / 4.0, fs);
        let expect = [c(1.0, 0.0), c(0.0, 1.0), c(-1.0, 0.0), c(0.0, -1.0), c(1.0, 0.0)];
        for (a, b) in y.samples.iter().zip(expect) {
            assert!((a - b).norm() < 1e-12);
        }
        assert_eq!(apply_cfo(&x, 0.0, fs), x);
    }

    #[test]
    fn cfo_inverse_rotation() {
        let cfg = PhyConfig::default();
        let x = SampleStream::new((0..500).map(|i| c((i as f64).sin(), (i as f64 * 0.3).cos())).collect(), 0.0125);
        let y = apply_cfo(&apply_cfo(&x, 100.0, cfg.fs_hz), -100.0, cfg.fs_hz);
        assert_eq!(y.t0_s, x.t0_s);
        for (a, b) in y.samples.iter().zip(&x.samples) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn timing_offset_identity_and_whole_sample() {
        let cfg = PhyConfig::default();
        let x = impulse(16, 5);
        assert_eq!(apply_timing_offset(&x, 0.0, &cfg).unwrap(), x);
        // Late sampling by one period: the impulse appears one sample earlier.
        let y = apply_timing_offset(&x, cfg.ts(), &cfg).unwrap();
        assert_eq!(y.samples[4], c(1.0, 0.0));
        assert_eq!(y.samples.iter().filter(|z| z.norm() > 0.0).count(), 1);
        let y = apply_timing_offset(&x, -cfg.ts(), &cfg).unwrap();
        assert_eq!(y.samples[6], c(1.0, 0.0));
    }

    #[test]
    fn timing_offset_rejects_beyond_cp() {
        let cfg = PhyConfig::default();
        let err = apply_timing_offset(&impulse(8, 0), 32.0 * cfg.ts(), &cfg).unwrap_err();
        assert!(matches!(err, Error::TimingOffsetTooLarge { .. }));
    }

    #[test]
    fn half_sample_offset_is_eq8_phase_slope() {
        // Oracle: DFT of the block before and after; the ratio must be e^{jπn/N}.
        let cfg = PhyConfig::default();
        let n = cfg.n_fft;
        let x = stream((0..n).map(|i| c(((i * 7) % 11) as f64 - 5.0, ((i * 3) % 5) as f64)).collect());
        let y = apply_timing_offset(&x, 0.5 * cfg.ts(), &cfg).unwrap();
        let dft = Dft::<f64>::new(n);
        let (mut fx, mut fy) = (x.samples.clone(), y.samples.clone());
        dft.forward(&mut fx);
        dft.forward(&mut fy);
        let (fx, fy) = (bins_to_centered(&fx), bins_to_centered(&fy));
        for i in 0..n {
            let carrier = centered_carrier(i, n) as f64;
            let expect = fx[i] * Complex::from_polar(1.0, std::f64::consts::PI * carrier / n as f64);
            assert!((fy[i] - expect).norm() < 1e-9, "carrier {carrier}");
        }
    }

    #[test]
    fn awgn_infinite_snr_and_determinism() {
        let x = stream((0..64).map(|i| c(i as f64, 1.0)).collect());
        assert_eq!(add_awgn(&x, f64::INFINITY, 1).unwrap(), x);
        assert_eq!(add_awgn(&x, 3.0, 9).unwrap(), add_awgn(&x, 3.0, 9).unwrap());
        assert_ne!(add_awgn(&x, 3.0, 9).unwrap(), add_awgn(&x, 3.0, 10).unwrap());
        assert_eq!(add_awgn(&stream(vec![c(0.0, 0.0); 4]), 10.0, 1), Err(Error::ZeroPower));
    }

    #[test]
    fn awgn_empirical_snr() {
        // Sample-variance oracle on a unit-power constant stream.
        let n = 1_000_000;
        let x = stream(vec![c(1.0, 0.0); n]);
        let y = add_awgn(&x, 0.0, 42).unwrap();
        let noise_power: f64 = y.samples.iter().map(|z| (z - c(1.0, 0.0)).norm_sqr()).sum::<f64>() / n as f64;
        let snr_db = 10.0 * (1.0 / noise_power).log10();
        assert!(snr_db.abs() < 0.1, "measured {snr_db} dB");
    }

    #[test]
    fn oracle_trivial_cases() {
        let cfg = PhyConfig::default();
        let state = SensorLinkState::ideal();
        let h = effective_channel_oracle::<f64>(&state, Direction::Downlink, 0.3, 0.0, &cfg);
        assert!(h.h.iter().all(|z| (z - c(1.0, 0.0)).norm() < 1e-12));

        let shifted = SensorLinkState { to_dl_s: cfg.ts(), ..SensorLinkState::ideal() };
        let h = effective_channel_oracle::<f64>(&shifted, Direction::Downlink, 0.0, 0.0, &cfg);
        let n = cfg.n_fft;
        for (i, z) in h.h.iter().enumerate() {
            let carrier = centered_carrier(i, n) as f64;
            let expect = Complex::from_polar(1.0, 2.0 * std::f64::consts::PI * carrier / n as f64);
            assert!((z - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn oracle_uplink_conjugates_cfo_term() {
        let cfg = PhyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut state = ImpairmentConfig::default().draw(&cfg, &mut rng);
        state.to_ul_s = state.to_dl_s;
        let (t, fr) = (0.0123, 37.0);
        let dl = effective_channel_oracle::<f64>(&state, Direction::Downlink, t, fr, &cfg);
        let ul = effective_channel_oracle::<f64>(&state, Direction::Uplink, t, fr, &cfg);
        let rot = Complex::from_polar(1.0, 2.0 * std::f64::consts::PI * fr * t);
        for (d, u) in dl.h.iter().zip(&ul.h) {
            assert!((d / rot - u * rot).norm() < 1e-9);
        }
    }

    #[test]
    fn oracle_without_impairments_is_dft_of_taps() {
        let cfg = PhyConfig::default();
        let profile = MultipathProfile::exponential(&[0, 2, 5], 2.0, &[0.1, -2.0, 1.3], &cfg);
        let state = SensorLinkState { profile: profile.clone(), ..SensorLinkState::ideal() };
        let h = effective_channel_oracle::<f64>(&state, Direction::Downlink, 0.0, 0.0, &cfg);
        let mut taps = vec![c(0.0, 0.0); cfg.n_fft];
        for (tap, d) in profile.taps.iter().zip(profile.sample_delays(&cfg).unwrap()) {
            taps[d] = tap.gain;
        }
        Dft::new(cfg.n_fft).forward(&mut taps);
        for (a, b) in h.h.iter().zip(bins_to_centered(&taps)) {
            assert!((a - b).norm() < 1e-12);
        }
        assert!((profile.power() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn multipath_is_linear() {
        let cfg = PhyConfig::default();
        let profile = MultipathProfile::exponential(&[0, 2, 5], 2.0, &[0.4, 1.0, -0.7], &cfg);
        let x = stream((0..40).map(|i| c((i as f64 * 0.7).sin(), 0.1 * i as f64)).collect());
        let y = stream((0..40).map(|i| c(1.0 / (1.0 + i as f64), -(i as f64 * 0.2).cos())).collect());
        let (alpha, beta) = (c(0.3, -1.2), c(-2.0, 0.5));
        let mix = stream(x.samples.iter().zip(&y.samples).map(|(a, b)| alpha * a + beta * b).collect());
        let lhs = apply_multipath(&mix, &profile, &cfg).unwrap();
        let (hx, hy) = (apply_multipath(&x, &profile, &cfg).unwrap(), apply_multipath(&y, &profile, &cfg).unwrap());
        for ((l, a), b) in lhs.samples.iter().zip(&hx.samples).zip(&hy.samples) {
            assert!((l - (alpha * a + beta * b)).norm() < 1e-12);
        }
    }

    #[test]
    fn f32_streams_work() {
        let cfg = PhyConfig::default();
        let x: SampleStream<f32> = SampleStream::new(vec![Complex::new(1.0, 0.0); 8], 0.0);
        let y = apply_cfo(&x, cfg.fs_hz / 4.0, cfg.fs_hz);
        assert!((y.samples[1] - Complex::new(0.0f32, 1.0)).norm() < 1e-6);
    }
}
