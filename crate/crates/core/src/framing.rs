//! Frame-timing and CFO sub-frames, frame layouts and frame-start detection.

use std::collections::BTreeMap;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{PhyConfig, SampleStream};
use crate::error::{Error, Result};
use crate::num::{lit, Real};

/// Differentially encoded, pair-upsampled ±1 sequence used to find frame starts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FtSequence {
    /// Transmitted ±1 chips, `symbols[m + 2] = symbols[m]·q[m]`.
    pub symbols: Vec<i8>,
    /// Upsampled PRBS `q[0], q[0], q[1], q[1], …` (length `m_ft`).
    pub q: Vec<i8>,
    pub seed_prbs: u64,
}

impl FtSequence {
    /// Builds the sequence from the `m_ft / 2` PRBS values before upsampling.
    pub fn from_prbs(prbs: &[i8], seed_prbs: u64) -> Self {
        let q: Vec<i8> = prbs.iter().flat_map(|&v| [v, v]).collect();
        let m_ft = q.len();
        let mut symbols = vec![1i8; m_ft];
        for m in 0..m_ft.saturating_sub(2) {
            symbols[m + 2] = symbols[m] * q[m];
        }
        Self { symbols, q, seed_prbs }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// The part of `q` a noise-free differential decoder reproduces (`m_ft - 2` chips).
    pub fn reference(&self) -> &[i8] {
        &self.q[..self.q.len().saturating_sub(2)]
    }

    /// Chips as complex samples of amplitude `amp`.
    pub fn to_stream<T: Real>(&self, amp: T) -> SampleStream<T> {
        let samples = self.symbols.iter().map(|&s| Complex::new(amp * lit(s as f64), T::zero())).collect();
        SampleStream::new(samples, 0.0)
    }
}

/// Seeded frame-timing sequence of length `config.m_ft`.
pub fn gen_ft(config: &PhyConfig, seed: u64) -> Result<FtSequence> {
    if !config.m_ft.is_multiple_of(2) || config.m_ft < 4 {
        return Err(Error::Config(format!("m_ft must be even and >= 4, got {}", config.m_ft)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prbs: Vec<i8> = (0..config.m_ft / 2).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
    Ok(FtSequence::from_prbs(&prbs, seed))
}

/// Single active tone `pilot_amp·e^{j2πm·n_cfo/N}`.
pub fn gen_cfo_subframe<T: Real>(config: &PhyConfig, length: usize, pilot_amp: T) -> Result<SampleStream<T>> {
    if length <= config.n_fft {
        return Err(Error::TooShort { needed: config.n_fft + 1, got: length });
    }
    let n = config.n_fft as i64;
    let tone = config.n_cfo_tone.rem_euclid(n);
    let two_pi = 2.0 * std::f64::consts::PI;
    let samples = (0..length as i64)
        .map(|m| {
            // Reduce the phase index exactly before converting to floating point.
            let phase = two_pi * ((m * tone) % n) as f64 / n as f64;
            Complex::new(pilot_amp * lit(phase.cos()), pilot_amp * lit(phase.sin()))
        })
        .collect();
    Ok(SampleStream::new(samples, 0.0))
}

/// Result of the frame-start search.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingDecision {
    pub m0: usize,
    pub peak: f64,
    pub valid: bool,
}

/// Differential decoder: `q̂[m] = sign(Re(r[m]·r*[m+2]))`.
pub fn differential_decode<T: Real>(r: &[Complex<T>]) -> Vec<i8> {
    r.windows(3).map(|w| if (w[0] * w[2].conj()).re >= T::zero() { 1 } else { -1 }).collect()
}

/// Searches every start position in `r`.
pub fn detect_frame<T: Real>(r: &SampleStream<T>, ft: &FtSequence, config: &PhyConfig) -> Result<TimingDecision> {
    detect_frame_within(&r.samples, ft, config, usize::MAX)
}

/// Differential decoding followed by cross-correlation with `q`.
///
/// Only starts `0..=max_start` are searched. The start estimate is the lag of
/// the largest `|Corr|` (earliest on ties); it is valid when that peak reaches
/// `config.gamma_th()`.
pub fn detect_frame_within<T: Real>(
    r: &[Complex<T>],
    ft: &FtSequence,
    config: &PhyConfig,
    max_start: usize,
) -> Result<TimingDecision> {
    let m_ft = ft.len();
    if r.len() < m_ft {
        return Err(Error::TooShort { needed: m_ft, got: r.len() });
    }
    let reference = ft.reference();
    let last_start = (r.len() - m_ft).min(max_start);
    let q_hat = differential_decode(&r[..(last_start + m_ft).min(r.len())]);
    let mut best = (0usize, i64::MIN);
    for start in 0..=last_start {
        let corr: i64 =
            q_hat[start..start + reference.len()].iter().zip(reference).map(|(&a, &b)| (a * b) as i64).sum();
        if corr.abs() > best.1 {
            best = (start, corr.abs());
        }
    }
    let peak = best.1 as f64;
    Ok(TimingDecision { m0: best.0, peak, valid: peak >= config.gamma_th() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FrameKind {
    InitPreamble,
    DigitalFrame,
    OtaFrame,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    pub name: String,
    pub offset: usize,
    pub length: usize,
}

/// Ordered, contiguous sections of one frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub kind: FrameKind,
    pub sections: Vec<Section>,
}

pub const FT: &str = "ft";
pub const CFO: &str = "cfo";
pub const PILOTS: &str = "pilots";
pub const DATA: &str = "data";

impl FrameLayout {
    fn build(kind: FrameKind, parts: &[(&str, usize)]) -> Self {
        let mut offset = 0;
        let sections = parts
            .iter()
            .map(|&(name, length)| {
                let s = Section { name: name.to_string(), offset, length };
                offset += length;
                s
            })
            .collect();
        Self { kind, sections }
    }

    /// FT followed by the long single-tone section, `l_span` samples longer than
    /// `m_cfo_init` so the coarse estimator sees `m_cfo_init` lag products.
    pub fn init_preamble(config: &PhyConfig) -> Self {
        Self::build(FrameKind::InitPreamble, &[(FT, config.m_ft), (CFO, config.m_cfo_init + config.l_span)])
    }

    /// FT, short single-tone section, `k_pilots` pilot symbols and `data_symbols` data symbols.
    pub fn digital_frame(config: &PhyConfig, k_pilots: usize, data_symbols: usize) -> Self {
        let sym = config.symbol_len();
        Self::build(
            FrameKind::DigitalFrame,
            &[(FT, config.m_ft), (CFO, config.m_cfo_frame), (PILOTS, k_pilots * sym), (DATA, data_symbols * sym)],
        )
    }

    /// FT, one common pilot symbol and `data_symbols` PAM symbols.
    pub fn ota_frame(config: &PhyConfig, data_symbols: usize) -> Self {
        let sym = config.symbol_len();
        Self::build(FrameKind::OtaFrame, &[(FT, config.m_ft), (PILOTS, sym), (DATA, data_symbols * sym)])
    }

    pub fn total_len(&self) -> usize {
        self.sections.last().map(|s| s.offset + s.length).unwrap_or(0)
    }

    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    /// Sample offset of the `index`-th OFDM symbol inside section `name`.
    pub fn symbol_offset(&self, name: &str, index: usize, config: &PhyConfig) -> Option<usize> {
        let s = self.section(name)?;
        let off = index * config.symbol_len();
        (off + config.symbol_len() <= s.length).then_some(s.offset + off)
    }
}

/// Concatenates the parts in layout order. Zero-length sections may be omitted.
pub fn assemble_frame<T: Real>(
    layout: &FrameLayout,
    parts: &BTreeMap<String, SampleStream<T>>,
) -> Result<SampleStream<T>> {
    let mut samples = Vec::with_capacity(layout.total_len());
    for s in &layout.sections {
        match parts.get(&s.name) {
            Some(p) if p.len() == s.length => samples.extend_from_slice(&p.samples),
            Some(p) => return Err(Error::LengthMismatch { expected: s.length, got: p.len() }),
            None if s.length == 0 => {}
            None => return Err(Error::MissingPart(s.name.clone())),
        }
    }
    Ok(SampleStream::new(samples, 0.0))
}

/// Splits a frame back into its named sections.
pub fn slice_frame<T: Real>(
    layout: &FrameLayout,
    frame: &SampleStream<T>,
) -> Result<BTreeMap<String, SampleStream<T>>> {
    if frame.len() < layout.total_len() {
        return Err(Error::TooShort { needed: layout.total_len(), got: frame.len() });
    }
    let ts = frame.t0_s;
    Ok(layout
        .sections
        .iter()
        .map(|s| {
            let part = frame.samples[s.offset..s.offset + s.length].to_vec();
            (s.name.clone(), SampleStream::new(part, ts))
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{add_awgn, apply_cfo};

    fn c(re: f64, im: f64) -> Complex<f64> {
        Complex::new(re, im)
    }

    #[test]
    fn constant_prbs_gives_all_ones() {
        let ft = FtSequence::from_prbs(&[1; 8], 0);
        assert!(ft.symbols.iter().all(|&s| s == 1));
    }

    #[test]
    fn hand_unrolled_recursion() {
        let ft = FtSequence::from_prbs(&[-1, 1, 1], 0);
        assert_eq!(ft.q, vec![-1, -1, 1, 1, 1, 1]);
        assert_eq!(ft.symbols, vec![1, 1, -1, -1, -1, -1]);
    }

    #[test]
    fn gen_ft_invariants_and_determinism() {
        let cfg = PhyConfig::default();
        let a = gen_ft(&cfg, 11).unwrap();
        assert_eq!(a, gen_ft(&cfg, 11).unwrap());
        assert_ne!(a.symbols, gen_ft(&cfg, 12).unwrap().symbols);
        assert_eq!(a.len(), cfg.m_ft);
        assert_eq!((a.symbols[0], a.symbols[1]), (1, 1));
        for m in 0..cfg.m_ft - 2 {
            assert_eq!(a.symbols[m + 2], a.symbols[m] * a.q[m]);
        }
        for pair in a.q.chunks(2) {
            assert_eq!(pair[0], pair[1]);
        }
        let odd = PhyConfig { m_ft: 63, ..cfg };
        assert!(gen_ft(&odd, 1).is_err());
    }

    #[test]
    fn cfo_subframe_tones() {
        let cfg = PhyConfig { n_cfo_tone: 0, ..PhyConfig::default() };
        let x: SampleStream<f64> = gen_cfo_subframe(&cfg, 300, 0.5).unwrap();
        assert!(x.samples.iter().all(|z| (z - c(0.5, 0.0)).norm() < 1e-15));

        let cfg = PhyConfig { n_cfo_tone: 64, ..PhyConfig::default() };
        let x: SampleStream<f64> = gen_cfo_subframe(&cfg, 300, 2.0).unwrap();
        let expect = [c(2.0, 0.0), c(0.0, 2.0), c(-2.0, 0.0), c(0.0, -2.0)];
        for (z, e) in x.samples.iter().zip(expect.iter().cycle()) {
            assert!((z - e).norm() < 1e-12);
        }
        assert!(x.samples.iter().all(|z| (z.norm() - 2.0).abs() < 1e-12));
        assert!(gen_cfo_subframe::<f64>(&cfg, 256, 1.0).is_err());
    }

    fn embed(ft: &FtSequence, delay: usize, tail: usize) -> SampleStream<f64> {
        let mut v = vec![c(0.0, 0.0); delay];
        v.extend(ft.to_stream::<f64>(1.0).samples);
        v.extend(std::iter::repeat_n(c(0.0, 0.0), tail));
        SampleStream::new(v, 0.0)
    }

    #[test]
    fn noise_free_peak_is_m_ft_minus_two() {
        let cfg = PhyConfig::default();
        let ft = gen_ft(&cfg, 5).unwrap();
        let d = detect_frame(&ft.to_stream::<f64>(1.0), &ft, &cfg).unwrap();
        assert_eq!(d, TimingDecision { m0: 0, peak: (cfg.m_ft - 2) as f64, valid: true });
    }

    #[test]
    fn delayed_frame_is_found() {
        let cfg = PhyConfig::default();
        let ft = gen_ft(&cfg, 6).unwrap();
        let d = detect_frame(&embed(&ft, 37, 20), &ft, &cfg).unwrap();
        assert_eq!(d.m0, 37);
        assert!(d.valid);
    }

    #[test]
    fn detection_tolerates_cfo() {
        let cfg = PhyConfig::default();
        let ft = gen_ft(&cfg, 7).unwrap();
        // 1/16 cycle per two samples: well below π/2.
        let r = apply_cfo(&embed(&ft, 12, 12), cfg.fs_hz / 32.0, cfg.fs_hz);
        let d = detect_frame(&r, &ft, &cfg).unwrap();
        assert_eq!((d.m0, d.peak), (12, (cfg.m_ft - 2) as f64));
    }

    #[test]
    fn short_stream_is_rejected() {
        let cfg = PhyConfig::default();
        let ft = gen_ft(&cfg, 1).unwrap();
        let r = SampleStream::<f64>::zeros(cfg.m_ft - 1, 0.0);
        assert!(matches!(detect_frame(&r, &ft, &cfg), Err(Error::TooShort { .. })));
    }

    #[test]
    fn pure_noise_false_alarm_rate() {
        // Monte-Carlo oracle: noise-only windows must rarely cross (M_FT - 2) / 2.
        let cfg = PhyConfig { m_ft: 64, ..PhyConfig::default() };
        let ft = gen_ft(&cfg, 2).unwrap();
        let mut alarms = 0;
        for trial in 0..1000u64 {
            let ones = SampleStream::new(vec![c(1.0, 0.0); 200], 0.0);
            let noisy = add_awgn(&ones, -300.0, trial).unwrap();
            if detect_frame(&noisy, &ft, &cfg).unwrap().valid {
                alarms += 1;
            }
        }
        assert!(alarms < 10, "{alarms} false alarms in 1000 trials");
    }

    #[test]
    fn layouts() {
        let cfg = PhyConfig::default();
        let d = FrameLayout::digital_frame(&cfg, 2, 0);
        assert_eq!(d.section(PILOTS).unwrap().length, 2 * 288);
        assert_eq!(d.total_len(), cfg.m_ft + cfg.m_cfo_frame + 576);
        let o = FrameLayout::ota_frame(&cfg, 3);
        assert!(o.section(CFO).is_none());
        assert_eq!(o.symbol_offset(DATA, 2, &cfg), Some(cfg.m_ft + 288 + 2 * 288));
        assert_eq!(o.symbol_offset(DATA, 3, &cfg), None);
        let p = FrameLayout::init_preamble(&cfg);
        assert_eq!(p.total_len(), cfg.m_ft + cfg.m_cfo_init + cfg.l_span);
        for l in [d, o, p] {
            for w in l.sections.windows(2) {
                assert_eq!(w[0].offset + w[0].length, w[1].offset);
            }
        }
    }

    #[test]
    fn assemble_and_slice_round_trip() {
        let cfg = PhyConfig { m_ft: 8, m_cfo_frame: 300, ..PhyConfig::default() };
        let layout = FrameLayout::digital_frame(&cfg, 1, 0);
        let mut parts = BTreeMap::new();
        parts.insert(FT.to_string(), gen_ft(&cfg, 1).unwrap().to_stream::<f64>(1.0));
        parts.insert(CFO.to_string(), gen_cfo_subframe::<f64>(&cfg, 300, 1.0).unwrap());
        parts.insert(PILOTS.to_string(), SampleStream::new(vec![c(0.25, -1.0); 288], 0.0));
        let frame = assemble_frame(&layout, &parts).unwrap();
        assert_eq!(frame.len(), 8 + 300 + 288);
        let back = slice_frame(&layout, &frame).unwrap();
        for (name, part) in &parts {
            assert_eq!(back[name].samples, part.samples);
        }
        assert!(back[DATA].is_empty());

        parts.insert(PILOTS.to_string(), SampleStream::new(vec![c(0.0, 0.0); 10], 0.0));
        assert!(matches!(assemble_frame(&layout, &parts), Err(Error::LengthMismatch { .. })));
        parts.remove(PILOTS);
        assert_eq!(assemble_frame(&layout, &parts), Err(Error::MissingPart(PILOTS.into())));
    }
}
