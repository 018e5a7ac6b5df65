//! OFDM symbols, subcarrier mappings and least-squares channel estimation.

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{PhyConfig, SampleStream};
use crate::dsp::{bins_to_centered, centered_carrier, centered_to_bins, Dft};
use crate::error::{Error, Result};
use crate::num::{lit, Real};

/// Deep-fade floor on `|ĥ|` below which a carrier is not inverted.
pub const EQUALIZER_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modulation {
    Qam4,
    Qam16,
    Pam,
    Raw,
}

/// One OFDM symbol in the frequency domain, centered order (`n = -N/2 … N/2-1`).
#[derive(Debug, Clone, PartialEq)]
pub struct OfdmSymbol<T: Real> {
    pub freq: Vec<Complex<T>>,
    pub modulation: Modulation,
}

impl<T: Real> OfdmSymbol<T> {
    pub fn new(freq: Vec<Complex<T>>, modulation: Modulation) -> Self {
        Self { freq, modulation }
    }

    pub fn zeros(n: usize) -> Self {
        Self::new(vec![Complex::new(T::zero(), T::zero()); n], Modulation::Raw)
    }

    pub fn len(&self) -> usize {
        self.freq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.freq.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.freq.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Element-wise sum, used to model superposition of symbols in the air.
    pub fn superpose(&self, other: &Self) -> Self {
        let freq = self.freq.iter().zip(&other.freq).map(|(a, b)| a + b).collect();
        Self::new(freq, Modulation::Raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChannelKind {
    Downlink,
    Uplink,
    Ota,
}

/// Per-subcarrier channel estimate. Carriers with `valid[i] == false` carry no information.
#[derive(Debug, Clone, PartialEq)]
pub struct FreqChannelEstimate<T: Real> {
    pub h: Vec<Complex<T>>,
    pub valid: Vec<bool>,
    pub t_est_s: f64,
    pub kind: ChannelKind,
}

impl<T: Real> FreqChannelEstimate<T> {
    pub fn new(h: Vec<Complex<T>>, valid: Vec<bool>, t_est_s: f64, kind: ChannelKind) -> Self {
        assert_eq!(h.len(), valid.len());
        Self { h, valid, t_est_s, kind }
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|v| **v).count()
    }

    pub fn is_finite(&self) -> bool {
        self.h.iter().zip(&self.valid).all(|(z, v)| !*v || (z.re.is_finite() && z.im.is_finite()))
    }

    /// Multiplies every carrier by `e^{j2π·n·shift/N}`, i.e. moves the timing reference by `shift` samples.
    pub fn ramped(&self, shift_samples: T) -> Self {
        let n = self.h.len();
        let step = (T::PI() + T::PI()) * shift_samples / lit(n as f64);
        let h = self
            .h
            .iter()
            .enumerate()
            .map(|(i, z)| *z * crate::num::cis(step * lit(centered_carrier(i, n) as f64)))
            .collect();
        Self { h, ..self.clone() }
    }
}

/// Multiplies carrier `n` by `e^{j2πn·shift/N}`: the symbol as seen with its
/// timing reference moved by a (fractional) `shift` samples.
pub fn ramp_symbol<T: Real>(sym: &mut OfdmSymbol<T>, shift_samples: f64) {
    if shift_samples == 0.0 {
        return;
    }
    let n = sym.len();
    let step = 2.0 * std::f64::consts::PI * shift_samples / n as f64;
    for (i, z) in sym.freq.iter_mut().enumerate() {
        *z = *z * crate::num::cis(lit::<T>(step * centered_carrier(i, n) as f64));
    }
}

/// Time-division orthogonal pilots: sensor `k` owns pilot OFDM symbol `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotPlan<T: Real> {
    pub pilot_symbols: Vec<OfdmSymbol<T>>,
}

impl<T: Real> PilotPlan<T> {
    /// Seeded pseudo-random 4-QAM pilots on the used carriers.
    pub fn new(k_sensors: usize, seed: u64, config: &PhyConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let per_symbol = 2 * config.used_count();
        let pilot_symbols = (0..k_sensors)
            .map(|_| {
                let bits: Vec<bool> = (0..per_symbol).map(|_| rng.random()).collect();
                map_qam(&bits, 4, config).expect("bit count matches carrier count")
            })
            .collect();
        Self { pilot_symbols }
    }

    pub fn k_sensors(&self) -> usize {
        self.pilot_symbols.len()
    }

    pub fn slot_of(&self, k: usize) -> usize {
        k
    }

    pub fn pilot(&self, k: usize) -> &OfdmSymbol<T> {
        &self.pilot_symbols[self.slot_of(k)]
    }
}

/// Modulator/demodulator with cached transforms.
#[derive(Debug, Clone)]
pub struct OfdmEngine<T: Real> {
    n_fft: usize,
    cp_len: usize,
    dft: Dft<T>,
}

impl<T: Real> OfdmEngine<T> {
    pub fn new(config: &PhyConfig) -> Self {
        Self { n_fft: config.n_fft, cp_len: config.cp_len, dft: Dft::new(config.n_fft) }
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    /// Inverse DFT of the symbol with the last `L` samples prepended.
    pub fn modulate(&self, sym: &OfdmSymbol<T>) -> Vec<Complex<T>> {
        assert_eq!(sym.len(), self.n_fft, "symbol length must equal n_fft");
        let mut body = centered_to_bins(&sym.freq);
        self.dft.inverse(&mut body);
        let mut out = Vec::with_capacity(self.n_fft + self.cp_len);
        out.extend_from_slice(&body[self.n_fft - self.cp_len..]);
        out.extend_from_slice(&body);
        out
    }

    /// DFT of the `N` samples starting at `start`.
    pub fn demodulate_window(&self, r: &[Complex<T>], start: usize) -> Result<OfdmSymbol<T>> {
        if start + self.n_fft > r.len() {
            return Err(Error::TooShort { needed: start + self.n_fft, got: r.len() });
        }
        let mut buf = r[start..start + self.n_fft].to_vec();
        self.dft.forward(&mut buf);
        Ok(OfdmSymbol::new(bins_to_centered(&buf), Modulation::Raw))
    }

    /// Strips the cyclic prefix of the symbol at the start of `r` and transforms it.
    pub fn demodulate(&self, r: &[Complex<T>]) -> Result<OfdmSymbol<T>> {
        if r.len() < self.n_fft + self.cp_len {
            return Err(Error::TooShort { needed: self.n_fft + self.cp_len, got: r.len() });
        }
        self.demodulate_window(r, self.cp_len)
    }

    pub fn forward(&self, buf: &mut [Complex<T>]) {
        self.dft.forward(buf)
    }

    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        self.dft.inverse(buf)
    }
}

pub fn ofdm_modulate<T: Real>(sym: &OfdmSymbol<T>, config: &PhyConfig) -> SampleStream<T> {
    SampleStream::new(OfdmEngine::new(config).modulate(sym), 0.0)
}

pub fn ofdm_demodulate<T: Real>(r: &SampleStream<T>, config: &PhyConfig) -> Result<OfdmSymbol<T>> {
    OfdmEngine::new(config).demodulate(&r.samples)
}

fn bits_per_symbol(order: usize) -> Result<usize> {
    match order {
        4 => Ok(2),
        16 => Ok(4),
        other => Err(Error::Config(format!("unsupported QAM order {other}"))),
    }
}

// Gray-coded amplitude levels per axis; index is the bit pattern read MSB first.
const GRAY4: [f64; 2] = [-1.0, 1.0];
const GRAY16: [f64; 4] = [-3.0, -1.0, 3.0, 1.0];

fn axis_levels(order: usize) -> (&'static [f64], f64) {
    if order == 4 {
        (&GRAY4, 1.0 / 2f64.sqrt())
    } else {
        (&GRAY16, 1.0 / 10f64.sqrt())
    }
}

/// Gray-mapped unit-average-power QAM on the used carriers.
pub fn map_qam<T: Real>(bits: &[bool], order: usize, config: &PhyConfig) -> Result<OfdmSymbol<T>> {
    let bps = bits_per_symbol(order)?;
    let positions = config.used_positions();
    let expected = bps * positions.len();
    if bits.len() != expected {
        return Err(Error::LengthMismatch { expected, got: bits.len() });
    }
    let (levels, scale) = axis_levels(order);
    let half = bps / 2;
    let axis = |chunk: &[bool]| -> f64 {
        let idx = chunk.iter().fold(0usize, |acc, &b| (acc << 1) | b as usize);
        levels[idx] * scale
    };
    let mut freq = vec![Complex::new(T::zero(), T::zero()); config.n_fft];
    for (chunk, &pos) in bits.chunks(bps).zip(&positions) {
        freq[pos] = Complex::new(lit(axis(&chunk[..half])), lit(axis(&chunk[half..])));
    }
    let modulation = if order == 4 { Modulation::Qam4 } else { Modulation::Qam16 };
    Ok(OfdmSymbol::new(freq, modulation))
}

/// Hard-decision nearest-point demapping on the used carriers.
pub fn demap_qam<T: Real>(sym: &OfdmSymbol<T>, order: usize, config: &PhyConfig) -> Result<Vec<bool>> {
    let bps = bits_per_symbol(order)?;
    if sym.len() != config.n_fft {
        return Err(Error::LengthMismatch { expected: config.n_fft, got: sym.len() });
    }
    let (levels, scale) = axis_levels(order);
    let half = bps / 2;
    let decide = |v: f64, out: &mut Vec<bool>| {
        let (idx, _) = levels
            .iter()
            .enumerate()
            .map(|(i, l)| (i, (v - l * scale).abs()))
            .fold((0, f64::INFINITY), |best, cur| if cur.1 < best.1 { cur } else { best });
        for b in (0..half).rev() {
            out.push((idx >> b) & 1 == 1);
        }
    };
    let mut bits = Vec::with_capacity(bps * config.used_count());
    for pos in config.used_positions() {
        let z = sym.freq[pos];
        decide(crate::num::to_f64(z.re), &mut bits);
        decide(crate::num::to_f64(z.im), &mut bits);
    }
    Ok(bits)
}

/// Places `v·a_pam` as a real amplitude on each used carrier. `values.len()` must equal the used-carrier count.
pub fn map_pam<T: Real>(values: &[T], a_pam: T, config: &PhyConfig) -> Result<OfdmSymbol<T>> {
    let positions = config.used_positions();
    if values.len() != positions.len() {
        return Err(Error::LengthMismatch { expected: positions.len(), got: values.len() });
    }
    let mut freq = vec![Complex::new(T::zero(), T::zero()); config.n_fft];
    for (index, (&v, &pos)) in values.iter().zip(&positions).enumerate() {
        if !(v.abs() <= T::one()) {
            return Err(Error::OutOfRange { index, value: crate::num::to_f64(v) });
        }
        freq[pos] = Complex::new(v * a_pam, T::zero());
    }
    Ok(OfdmSymbol::new(freq, Modulation::Pam))
}

/// Reads `Re(x[n]) / a_pam` from each used carrier.
pub fn demap_pam<T: Real>(sym: &OfdmSymbol<T>, a_pam: T, config: &PhyConfig) -> Vec<T> {
    config.used_positions().iter().map(|&pos| sym.freq[pos].re / a_pam).collect()
}

/// `ĥ[n] = r̃[n] / x̃[n]` on every used carrier.
pub fn ls_channel_estimate<T: Real>(
    rx_pilot: &OfdmSymbol<T>,
    known_pilot: &OfdmSymbol<T>,
    t_s: f64,
    config: &PhyConfig,
) -> Result<FreqChannelEstimate<T>> {
    let n = config.n_fft;
    for s in [rx_pilot, known_pilot] {
        if s.len() != n {
            return Err(Error::LengthMismatch { expected: n, got: s.len() });
        }
    }
    let mut h = vec![Complex::new(T::zero(), T::zero()); n];
    let mut valid = vec![false; n];
    for pos in config.used_positions() {
        let x = known_pilot.freq[pos];
        if x.norm_sqr() == T::zero() {
            return Err(Error::ZeroPilot(centered_carrier(pos, n)));
        }
        h[pos] = rx_pilot.freq[pos] / x;
        valid[pos] = true;
    }
    Ok(FreqChannelEstimate::new(h, valid, t_s, ChannelKind::Downlink))
}

/// Averages estimates of the same channel carrier by carrier.
pub fn average_estimates<T: Real>(estimates: &[FreqChannelEstimate<T>]) -> Option<FreqChannelEstimate<T>> {
    let first = estimates.first()?;
    let count: T = lit(estimates.len() as f64);
    let mut out = first.clone();
    for i in 0..first.len() {
        let sum = estimates.iter().fold(Complex::new(T::zero(), T::zero()), |acc, e| acc + e.h[i]);
        out.h[i] = sum / count;
        out.valid[i] = estimates.iter().all(|e| e.valid[i]);
    }
    Some(out)
}

/// Zero-forcing reconstruction `x̂[n] = r̃[n] / ĥ[n]`.
///
/// Returns the equalized symbol and a per-carrier reliability mask; carriers
/// that are invalid in the estimate or below [`EQUALIZER_FLOOR`] are zeroed and
/// flagged unreliable.
pub fn equalize<T: Real>(data: &OfdmSymbol<T>, est: &FreqChannelEstimate<T>) -> (OfdmSymbol<T>, Vec<bool>) {
    let floor: T = lit(EQUALIZER_FLOOR);
    let mut reliable = vec![false; data.len()];
    let freq = data
        .freq
        .iter()
        .zip(&est.h)
        .zip(&est.valid)
        .enumerate()
        .map(|(i, ((r, h), &ok))| {
            if ok && h.norm() >= floor {
                reliable[i] = true;
                r / h
            } else {
                Complex::new(T::zero(), T::zero())
            }
        })
        .collect();
    (OfdmSymbol::new(freq, data.modulation), reliable)
}

/// One `re im` pair per line, for plotting constellations.
pub fn constellation_lines<T: Real>(symbols: &[OfdmSymbol<T>], config: &PhyConfig) -> String {
    let mut out = String::new();
    for s in symbols {
        for pos in config.used_positions() {
            let z = s.freq[pos];
            out.push_str(&format!("{} {}\n", z.re, z.im));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{
        apply_multipath, effective_channel_oracle, Direction, MultipathProfile, SensorLinkState, Tap,
    };

    fn cfg() -> PhyConfig {
        PhyConfig::default()
    }

    fn random_symbol(seed: u64, config: &PhyConfig) -> OfdmSymbol<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let freq =
            (0..config.n_fft).map(|_| Complex::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        OfdmSymbol::new(freq, Modulation::Raw)
    }

    #[test]
    fn dc_impulse_gives_constant_samples() {
        let config = cfg();
        let mut sym = OfdmSymbol::<f64>::zeros(config.n_fft);
        sym.freq[config.n_fft / 2] = Complex::new(1.0, 0.0);
        let x = ofdm_modulate(&sym, &config);
        assert_eq!(x.len(), config.n_fft + config.cp_len);
        let expect = 1.0 / config.n_fft as f64;
        assert!(x.samples.iter().all(|z| (z - Complex::new(expect, 0.0)).norm() < 1e-15));
    }

    #[test]
    fn modulate_demodulate_round_trip_and_parseval() {
        let config = cfg();
        let sym = random_symbol(1, &config);
        let x = ofdm_modulate(&sym, &config);
        let back = ofdm_demodulate(&x, &config).unwrap();
        for (a, b) in back.freq.iter().zip(&sym.freq) {
            assert!((a - b).norm() < 1e-12);
        }
        let body_energy: f64 = x.samples[config.cp_len..].iter().map(|z| z.norm_sqr()).sum();
        let freq_energy: f64 = sym.freq.iter().map(|z| z.norm_sqr()).sum();
        assert!((body_energy - freq_energy / config.n_fft as f64).abs() < 1e-12);
        // Cyclic prefix copies the tail.
        assert_eq!(&x.samples[..config.cp_len], &x.samples[config.n_fft..]);
    }

    #[test]
    fn demodulate_rejects_short_input() {
        let config = cfg();
        let r = SampleStream::<f64>::zeros(config.n_fft, 0.0);
        assert!(matches!(ofdm_demodulate(&r, &config), Err(Error::TooShort { .. })));
    }

    #[test]
    fn flat_gain_scales_every_carrier() {
        let config = cfg();
        let sym = random_symbol(2, &config);
        let g = Complex::new(0.3, -0.8);
        let mut x = ofdm_modulate(&sym, &config);
        x.samples.iter_mut().for_each(|z| *z = *z * g);
        let y = ofdm_demodulate(&x, &config).unwrap();
        for (a, b) in y.freq.iter().zip(&sym.freq) {
            assert!((a - b * g).norm() < 1e-12);
        }
    }

    #[test]
    fn two_tap_channel_matches_oracle() {
        let config = cfg();
        let sym = random_symbol(3, &config);
        let profile = MultipathProfile {
            taps: vec![
                Tap { gain: Complex::new(0.9, 0.1), delay_s: 0.0 },
                Tap { gain: Complex::new(-0.2, 0.35), delay_s: 3.0 * config.ts() },
            ],
        };
        let y = apply_multipath(&ofdm_modulate(&sym, &config), &profile, &config).unwrap();
        let rx = ofdm_demodulate(&y, &config).unwrap();
        let state = SensorLinkState { profile, ..SensorLinkState::ideal() };
        let h = effective_channel_oracle::<f64>(&state, Direction::Downlink, 0.0, 0.0, &config);
        for i in 0..config.n_fft {
            assert!((rx.freq[i] - sym.freq[i] * h.h[i]).norm() < 1e-10);
        }
    }

    #[test]
    fn qam_round_trip_and_power() {
        let config = cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for order in [4usize, 16] {
            let bps = if order == 4 { 2 } else { 4 };
            let bits: Vec<bool> = (0..bps * config.used_count()).map(|_| rng.random()).collect();
            let sym: OfdmSymbol<f64> = map_qam(&bits, order, &config).unwrap();
            assert_eq!(demap_qam(&sym, order, &config).unwrap(), bits);
        }
        // Every 16-QAM point once: average power 1.
        let config16 = PhyConfig { n_fft: 16, cp_len: 4, ..cfg() };
        let bits: Vec<bool> = (0..16u8).flat_map(|v| (0..4).rev().map(move |b| (v >> b) & 1 == 1)).collect();
        let sym: OfdmSymbol<f64> = map_qam(&bits, 16, &config16).unwrap();
        let p: f64 = sym.freq.iter().map(|z| z.norm_sqr()).sum::<f64>() / 16.0;
        assert!((p - 1.0).abs() < 1e-12);
        assert!(map_qam::<f64>(&bits[..5], 16, &config16).is_err());
        assert!(map_qam::<f64>(&bits, 8, &config16).is_err());
    }

    #[test]
    fn gray_neighbours_differ_by_one_bit() {
        for levels in [&GRAY16[..], &GRAY4[..]] {
            let mut by_level: Vec<(f64, usize)> = levels.iter().enumerate().map(|(i, l)| (*l, i)).collect();
            by_level.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            for w in by_level.windows(2) {
                assert_eq!((w[0].1 ^ w[1].1).count_ones(), 1);
            }
        }
    }

    #[test]
    fn pam_round_trip_zero_and_superposition() {
        let config = cfg();
        let a = 3f64.sqrt();
        let va: Vec<f64> = (0..config.n_fft).map(|i| ((i as f64) * 0.37).sin()).collect();
        let vb: Vec<f64> = (0..config.n_fft).map(|i| ((i as f64) * 0.11).cos() * 0.5).collect();
        let sa = map_pam(&va, a, &config).unwrap();
        let back = demap_pam(&sa, a, &config);
        assert!(back.iter().zip(&va).all(|(x, y)| (x - y).abs() < 1e-15));
        let zero = map_pam(&vec![0.0; config.n_fft], a, &config).unwrap();
        assert!(zero.freq.iter().all(|z| z.norm() == 0.0));
        let sum = demap_pam(&sa.superpose(&map_pam(&vb, a, &config).unwrap()), a, &config);
        for i in 0..config.n_fft {
            assert!((sum[i] - (va[i] + vb[i])).abs() < 1e-12);
        }
        let mut bad = va.clone();
        bad[7] = 1.5;
        assert!(matches!(map_pam(&bad, a, &config), Err(Error::OutOfRange { index: 7, .. })));
    }

    #[test]
    fn ls_estimate_identity_and_exact() {
        let config = cfg();
        let pilot = PilotPlan::<f64>::new(1, 9, &config).pilot(0).clone();
        let est = ls_channel_estimate(&pilot, &pilot, 0.0, &config).unwrap();
        assert!(est.h.iter().all(|z| (z - Complex::new(1.0, 0.0)).norm() < 1e-15));
        let h: Vec<Complex<f64>> =
            (0..config.n_fft).map(|i| Complex::from_polar(0.5 + i as f64 / 512.0, i as f64)).collect();
        let rx = OfdmSymbol::new(pilot.freq.iter().zip(&h).map(|(x, h)| x * h).collect(), Modulation::Raw);
        let est = ls_channel_estimate(&rx, &pilot, 0.0, &config).unwrap();
        assert!(est.h.iter().zip(&h).all(|(a, b)| (a - b).norm() < 1e-12));
        let mut holes = pilot.clone();
        holes.freq[10] = Complex::new(0.0, 0.0);
        assert!(matches!(ls_channel_estimate(&rx, &holes, 0.0, &config), Err(Error::ZeroPilot(-118))));
    }

    #[test]
    fn equalize_identity_floor_and_recovery() {
        let config = cfg();
        let sym = random_symbol(5, &config);
        let ones = FreqChannelEstimate::new(
            vec![Complex::new(1.0, 0.0); config.n_fft],
            vec![true; config.n_fft],
            0.0,
            ChannelKind::Downlink,
        );
        assert_eq!(equalize(&sym, &ones).0.freq, sym.freq);
        let mut h = ones.clone();
        h.h[3] = Complex::new(1e-7, 0.0);
        h.h[4] = Complex::new(0.5, 0.5);
        let rx = OfdmSymbol::new(sym.freq.iter().zip(&h.h).map(|(x, h)| x * h).collect(), Modulation::Raw);
        let (eq, reliable) = equalize(&rx, &h);
        assert!(!reliable[3] && reliable[4]);
        assert!((eq.freq[4] - sym.freq[4]).norm() < 1e-12);
    }

    #[test]
    fn guard_carriers_are_skipped() {
        let config = PhyConfig { null_guards: true, ..cfg() };
        let used = config.used_count();
        assert_eq!(used, 256 - 1 - 16);
        let v = vec![0.5; used];
        let sym = map_pam(&v, 1.0, &config).unwrap();
        assert_eq!(sym.freq[config.n_fft / 2], Complex::new(0.0, 0.0));
        assert_eq!(sym.freq[0], Complex::new(0.0, 0.0));
        assert_eq!(demap_pam(&sym, 1.0, &config), v);
    }
}
