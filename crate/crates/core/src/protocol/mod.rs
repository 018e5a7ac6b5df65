//! Two-stage OTA handshake: estimators, pre-equalization and the link session.

mod session;

pub use session::{run_handshake, OtaSession, ProtocolConfig, RoundOutcome, SensorRoundTrace, StageOneTrace};

use num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::channel::PhyConfig;
use crate::dsp::centered_carrier;
use crate::error::{Error, Result};
use crate::num::{cis, lit, to_f64, wrap_angle, Real};
use crate::ofdm::{FreqChannelEstimate, OfdmSymbol, EQUALIZER_FLOOR};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Sum of `conj(h[n])·h[n+1]` over adjacent carriers valid in `h`.
fn adjacent_product<T: Real>(h: &FreqChannelEstimate<T>) -> Result<Complex<f64>> {
    let mut acc = Complex::new(0.0, 0.0);
    let mut pairs = 0;
    for i in 0..h.len().saturating_sub(1) {
        if h.valid[i] && h.valid[i + 1] {
            let p = h.h[i].conj() * h.h[i + 1];
            acc += Complex::new(to_f64(p.re), to_f64(p.im));
            pairs += 1;
        }
    }
    if pairs == 0 {
        return Err(Error::NoValidCarriers);
    }
    Ok(acc)
}

/// Phase slope of an estimate expressed as a delay in samples, in `(-N/2, N/2]`.
pub fn slope_samples<T: Real>(h: &FreqChannelEstimate<T>) -> Result<f64> {
    Ok(adjacent_product(h)?.arg() * h.len() as f64 / TWO_PI)
}

/// Intercept of the unwrapped phase response, averaged over `±n` carrier pairs.
pub fn estimate_phi0<T: Real>(h_ota: &FreqChannelEstimate<T>) -> Result<f64> {
    let n = h_ota.len();
    let mut unwrapped = vec![None; n];
    let mut prev: Option<f64> = None;
    for i in 0..n {
        if !h_ota.valid[i] {
            continue;
        }
        let z = h_ota.h[i];
        let a = to_f64(z.im).atan2(to_f64(z.re));
        let u = match prev {
            Some(p) => p + wrap_angle(a - p),
            None => a,
        };
        unwrapped[i] = Some(u);
        prev = Some(u);
    }
    let half = n / 2;
    let (mut sum, mut count) = (0.0, 0usize);
    for m in 1..half {
        if let (Some(a), Some(b)) = (unwrapped[half - m], unwrapped[half + m]) {
            sum += a + b;
            count += 2;
        }
    }
    if count == 0 {
        return Err(Error::NoValidCarriers);
    }
    Ok(wrap_angle(sum / count as f64))
}

/// Timing offset from the mean phase increment between adjacent carriers, in seconds.
pub fn estimate_tau0<T: Real>(h_ota: &FreqChannelEstimate<T>, config: &PhyConfig) -> Result<f64> {
    let n = h_ota.len();
    let coarse = slope_samples(h_ota)?;
    // The adjacent-product slope is robust but noisy; refine it with a straight-line
    // fit of the phase left after removing the coarse ramp and the mean rotation.
    let derot: Vec<(f64, Complex<f64>)> = (0..n)
        .filter(|&i| h_ota.valid[i])
        .map(|i| {
            let c = centered_carrier(i, n) as f64;
            let z = Complex::new(to_f64(h_ota.h[i].re), to_f64(h_ota.h[i].im));
            (c, z * Complex::from_polar(1.0, -TWO_PI * c * coarse / n as f64))
        })
        .collect();
    let mean_rot = derot.iter().fold(Complex::new(0.0, 0.0), |a, (_, z)| a + z);
    if derot.len() < 2 || mean_rot.norm() == 0.0 {
        return Ok(coarse / config.fs_hz);
    }
    let back = Complex::from_polar(1.0, -mean_rot.arg());
    let m = derot.len() as f64;
    let c_mean = derot.iter().map(|(c, _)| c).sum::<f64>() / m;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (c, z) in &derot {
        let dx = c - c_mean;
        sxy += dx * (z * back).arg();
        sxx += dx * dx;
    }
    Ok((coarse + sxy / sxx * n as f64 / TWO_PI) / config.fs_hz)
}

/// Residual CFO seen between two downlink estimates `dt_dl_s` apart.
pub fn estimate_residual_cfo_sensor<T: Real>(
    h_dl_prev: &FreqChannelEstimate<T>,
    h_dl_now: &FreqChannelEstimate<T>,
    dt_dl_s: f64,
) -> Result<f64> {
    if h_dl_prev.len() != h_dl_now.len() {
        return Err(Error::LengthMismatch { expected: h_dl_prev.len(), got: h_dl_now.len() });
    }
    if !(dt_dl_s > 0.0) {
        return Err(Error::Config(format!("downlink interval must be positive, got {dt_dl_s}")));
    }
    let mut acc = Complex::new(0.0, 0.0);
    let mut any = false;
    for i in 0..h_dl_now.len() {
        if h_dl_prev.valid[i] && h_dl_now.valid[i] {
            let p = h_dl_prev.h[i].conj() * h_dl_now.h[i];
            acc += Complex::new(to_f64(p.re), to_f64(p.im));
            any = true;
        }
    }
    if !any {
        return Err(Error::NoValidCarriers);
    }
    Ok(acc.arg() / (TWO_PI * dt_dl_s))
}

/// `φ̂_i = φ̂_{i-1} − 2π·Δf̂_r·(Δt_DL + Δt_UL)`, reduced to `(-π, π]`.
pub fn update_phi(phi_prev: f64, dfr_hat_hz: f64, dt_dl_s: f64, dt_ul_s: f64) -> f64 {
    wrap_angle(phi_prev - TWO_PI * dfr_hat_hz * (dt_dl_s + dt_ul_s))
}

/// Whole-sample timing step between two downlink estimates.
///
/// A later downlink window raises the phase slope of the estimate by one
/// sample per sample of lateness; the uplink timing is unchanged, so `τ`
/// moves the opposite way. Returns the updated `τ̂` and the step in samples.
pub fn update_tau<T: Real>(
    tau_prev_s: f64,
    h_dl_prev: &FreqChannelEstimate<T>,
    h_dl_now: &FreqChannelEstimate<T>,
    config: &PhyConfig,
) -> Result<(f64, i64)> {
    let prev = adjacent_product(h_dl_prev)?;
    let now = adjacent_product(h_dl_now)?;
    let diff = (now * prev.conj()).arg() * config.n_fft as f64 / TWO_PI;
    let step = diff.round() as i64;
    if step.abs() > 1 {
        return Err(Error::SyncLoss { samples: step });
    }
    Ok((tau_prev_s - step as f64 * config.ts(), step))
}

/// Per-sensor compensation state carried between rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct PreEqState<T: Real> {
    pub phi_hat: f64,
    pub tau_hat_s: f64,
    pub dfr_hat_hz: f64,
    pub h_dl_prev: Option<FreqChannelEstimate<T>>,
    pub t_dl_prev: f64,
    pub t_ul_prev: f64,
    pub round_i: usize,
}

impl<T: Real> Default for PreEqState<T> {
    fn default() -> Self {
        Self {
            phi_hat: 0.0,
            tau_hat_s: 0.0,
            dfr_hat_hz: 0.0,
            h_dl_prev: None,
            t_dl_prev: 0.0,
            t_ul_prev: 0.0,
            round_i: 0,
        }
    }
}

/// A pre-equalized symbol plus the transmit-side flags.
#[derive(Debug, Clone, PartialEq)]
pub struct PreEqualized<T: Real> {
    pub symbol: OfdmSymbol<T>,
    /// Used carriers whose denominator fell below the equalizer floor (sent as zero).
    pub deep_fades: usize,
    /// Mean of `1/|denominator|²` over the used carriers.
    pub amplification: f64,
    pub power_capped: bool,
}

/// `x̃_e[n] = x̃[n] / (e^{j(φ̂ + 2πn·f_s·τ̂/N)}·ĥ_DL[n])`.
pub fn pre_equalize<T: Real>(
    x: &OfdmSymbol<T>,
    phi_hat: f64,
    tau_hat_s: f64,
    h_dl_now: &FreqChannelEstimate<T>,
    power_cap: f64,
    config: &PhyConfig,
) -> Result<PreEqualized<T>> {
    let n = config.n_fft;
    if x.len() != n || h_dl_now.len() != n {
        return Err(Error::LengthMismatch { expected: n, got: x.len().min(h_dl_now.len()) });
    }
    let slope = TWO_PI * config.fs_hz * tau_hat_s / n as f64;
    let mut freq = vec![Complex::new(T::zero(), T::zero()); n];
    let (mut deep_fades, mut gain_sum, mut used) = (0, 0.0, 0usize);
    for i in config.used_positions() {
        used += 1;
        let rot: Complex<T> = cis(lit(phi_hat + slope * centered_carrier(i, n) as f64));
        let den = rot * h_dl_now.h[i];
        let mag = to_f64(den.norm());
        if !h_dl_now.valid[i] || !(mag >= EQUALIZER_FLOOR) {
            deep_fades += 1;
            continue;
        }
        gain_sum += 1.0 / (mag * mag);
        freq[i] = x.freq[i] / den;
    }
    let amplification = if used == 0 { 0.0 } else { gain_sum / used as f64 };
    Ok(PreEqualized {
        symbol: OfdmSymbol::new(freq, x.modulation),
        deep_fades,
        amplification,
        power_capped: amplification > power_cap,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    DlTrigger,
    UlPreEqAck,
    CtrlBroadcast,
    DlOtaRequest,
    UlOtaFrame,
}

/// Payload summary of one handshake message.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum EventPayload {
    Frame { start_sample: u64, len: usize },
    Control { phi0: Vec<f64>, tau0_s: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolEvent {
    pub kind: EventKind,
    pub round: usize,
    pub payload: EventPayload,
}

/// Checks that `events` follow the handshake order: trigger, acknowledgment,
/// control broadcast, then request/frame pairs.
pub fn validate_sequence(events: &[ProtocolEvent]) -> Result<()> {
    use EventKind::*;
    let mut expect = vec![DlTrigger];
    for (i, e) in events.iter().enumerate() {
        if !expect.contains(&e.kind) {
            return Err(Error::Config(format!("event {i} ({:?}) out of order, expected one of {expect:?}", e.kind)));
        }
        // A request may repeat when the previous attempt failed at a sensor.
        expect = match e.kind {
            DlTrigger => vec![UlPreEqAck, DlTrigger],
            UlPreEqAck => vec![CtrlBroadcast],
            CtrlBroadcast => vec![DlOtaRequest],
            DlOtaRequest => vec![UlOtaFrame, DlOtaRequest],
            UlOtaFrame => vec![DlOtaRequest],
        };
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{effective_channel_oracle, Direction, MultipathProfile, SensorLinkState};
    use crate::ofdm::{map_pam, ChannelKind};

    fn cfg() -> PhyConfig {
        PhyConfig::default()
    }

    fn line(phi: f64, tau_samples: f64, config: &PhyConfig) -> FreqChannelEstimate<f64> {
        let n = config.n_fft;
        let h = (0..n)
            .map(|i| Complex::from_polar(1.0, phi + TWO_PI * centered_carrier(i, n) as f64 * tau_samples / n as f64))
            .collect();
        FreqChannelEstimate::new(h, vec![true; n], 0.0, ChannelKind::Ota)
    }

    #[test]
    fn phi0_on_flat_and_sloped_channels() {
        let c = cfg();
        assert!(estimate_phi0(&line(0.0, 0.0, &c)).unwrap().abs() < 1e-12);
        assert!((estimate_phi0(&line(1.1, 0.0, &c)).unwrap() - 1.1).abs() < 1e-12);
        for (phi, tau) in [(2.9, 1.5), (-3.0, -7.25), (0.4, 12.0)] {
            let est = estimate_phi0(&line(phi, tau, &c)).unwrap();
            assert!(wrap_angle(est - phi).abs() < 1e-9, "{phi} {tau} -> {est}");
        }
    }

    #[test]
    fn tau0_cases() {
        let c = cfg();
        assert!(estimate_tau0(&line(0.0, 0.0, &c), &c).unwrap().abs() < 1e-15);
        let est = estimate_tau0(&line(0.0, 1.5, &c), &c).unwrap();
        assert!((est - 1.5 * c.ts()).abs() < 1e-9 * c.ts());
        let rotated = estimate_tau0(&line(2.2, 1.5, &c), &c).unwrap();
        assert!((rotated - est).abs() < 1e-20);
    }

    #[test]
    fn estimators_reject_empty_masks() {
        let c = cfg();
        let mut h = line(0.0, 0.0, &c);
        h.valid.iter_mut().for_each(|v| *v = false);
        assert_eq!(estimate_phi0(&h), Err(Error::NoValidCarriers));
        assert_eq!(estimate_tau0(&h, &c), Err(Error::NoValidCarriers));
    }

    #[test]
    fn residual_cfo_from_constructed_pair() {
        let c = cfg();
        let prev = line(0.3, 2.0, &c);
        assert_eq!(estimate_residual_cfo_sensor(&prev, &prev, 1e-3).unwrap(), 0.0);
        let dt = 1e-3;
        let mut now = prev.clone();
        now.h.iter_mut().for_each(|z| *z *= Complex::from_polar(1.0, TWO_PI * 50.0 * dt));
        assert!((estimate_residual_cfo_sensor(&prev, &now, dt).unwrap() - 50.0).abs() < 1e-9);
    }

    #[test]
    fn phi_update_arithmetic() {
        assert_eq!(update_phi(0.7, 0.0, 1e-3, 1e-3), 0.7);
        let p = update_phi(0.0, 100.0, 0.5e-3, 0.5e-3);
        assert!((p + 0.2 * std::f64::consts::PI).abs() < 1e-12);
        let two = update_phi(update_phi(0.1, 30.0, 1e-3, 2e-3), 30.0, 3e-3, 1e-3);
        let once = update_phi(0.1, 30.0, 4e-3, 3e-3);
        assert!(wrap_angle(two - once).abs() < 1e-12);
    }

    #[test]
    fn tau_update_rounding() {
        let c = cfg();
        let ts = c.ts();
        let base = line(0.2, 3.0, &c);
        assert_eq!(update_tau(5.0 * ts, &base, &base, &c).unwrap(), (5.0 * ts, 0));
        // Impulse response delayed by one sample: slope drops by one.
        let (tau, step) = update_tau(5.0 * ts, &base, &line(0.2, 2.0, &c), &c).unwrap();
        assert_eq!(step, -1);
        assert!((tau - 6.0 * ts).abs() < 1e-15);
        assert_eq!(update_tau(0.0, &base, &line(0.2, 2.6, &c), &c).unwrap().1, 0);
        assert_eq!(update_tau(0.0, &base, &line(0.2, 5.0, &c), &c), Err(Error::SyncLoss { samples: 2 }));
    }

    #[test]
    fn pre_equalize_identity_and_flags() {
        let c = cfg();
        let x = map_pam(&vec![0.5; c.used_count()], 3f64.sqrt(), &c).unwrap();
        let unit = line(0.0, 0.0, &c);
        let out = pre_equalize(&x, 0.0, 0.0, &unit, 10.0, &c).unwrap();
        assert_eq!(out.symbol, x);
        assert_eq!((out.deep_fades, out.power_capped), (0, false));
        assert!((out.amplification - 1.0).abs() < 1e-12);

        let mut weak = unit.clone();
        weak.h.iter_mut().for_each(|z| *z *= 0.2);
        weak.h[5] = Complex::new(0.0, 0.0);
        let out = pre_equalize(&x, 0.0, 0.0, &weak, 10.0, &c).unwrap();
        assert_eq!(out.deep_fades, 1);
        assert!(out.power_capped);
        assert_eq!(out.symbol.freq[5], Complex::new(0.0, 0.0));
    }

    fn sensor(seed: u64, c: &PhyConfig) -> SensorLinkState {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        crate::channel::ImpairmentConfig::default().draw(c, &mut rng)
    }

    /// Ground truth of Eq. (14): `φ = −2πΔf_r(t_DL + t_UL)`, `τ = ΔT_UL − ΔT_DL`.
    fn truth(s: &SensorLinkState, dfr: f64, t_dl: f64, t_ul: f64) -> (f64, f64) {
        (wrap_angle(-TWO_PI * dfr * (t_dl + t_ul)), s.to_ul_s - s.to_dl_s)
    }

    #[test]
    fn oracle_consistency_of_stage_one_estimators() {
        let c = cfg();
        for seed in 0..20 {
            let s = sensor(seed, &c);
            let dfr = 7.0 * (seed as f64 - 10.0);
            let (t_dl, t_ul) = (1.25e-3, 1.75e-3);
            let h_dl = effective_channel_oracle::<f64>(&s, Direction::Downlink, t_dl, dfr, &c);
            let h_ul = effective_channel_oracle::<f64>(&s, Direction::Uplink, t_ul, dfr, &c);
            let ota: Vec<_> = h_ul.h.iter().zip(&h_dl.h).map(|(u, d)| u / d).collect();
            let ota = FreqChannelEstimate::new(ota, vec![true; c.n_fft], t_ul, ChannelKind::Ota);
            let (phi, tau) = truth(&s, dfr, t_dl, t_ul);
            assert!(wrap_angle(estimate_phi0(&ota).unwrap() - phi).abs() < 1e-9);
            assert!((estimate_tau0(&ota, &c).unwrap() - tau).abs() < 1e-9 * c.ts());

            let t2 = t_dl + 1e-3;
            let h_dl2 = effective_channel_oracle::<f64>(&s, Direction::Downlink, t2, dfr, &c);
            assert!((estimate_residual_cfo_sensor(&h_dl, &h_dl2, 1e-3).unwrap() - dfr).abs() < 1e-9);
        }
    }

    #[test]
    fn superposition_identity_with_perfect_estimates() {
        let c = cfg();
        let (t_dl, t_ul) = (2.0e-3, 2.5e-3);
        let mut rx = vec![Complex::new(0.0, 0.0); c.n_fft];
        let mut sum = vec![Complex::new(0.0, 0.0); c.n_fft];
        for (k, seed) in [3u64, 4].into_iter().enumerate() {
            let s = sensor(seed, &c);
            let dfr = 4.0 - 9.0 * k as f64;
            let vals: Vec<f64> = (0..c.used_count()).map(|i| ((i * (k + 3)) % 17) as f64 / 8.5 - 1.0).collect();
            let x = map_pam(&vals, 3f64.sqrt(), &c).unwrap();
            let h_dl = effective_channel_oracle::<f64>(&s, Direction::Downlink, t_dl, dfr, &c);
            let h_ul = effective_channel_oracle::<f64>(&s, Direction::Uplink, t_ul, dfr, &c);
            let (phi, tau) = truth(&s, dfr, t_dl, t_ul);
            let tx = pre_equalize(&x, phi, tau, &h_dl, 10.0, &c).unwrap();
            for i in 0..c.n_fft {
                rx[i] += h_ul.h[i] * tx.symbol.freq[i];
                sum[i] += x.freq[i];
            }
        }
        let err = rx.iter().zip(&sum).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-9, "{err}");
    }

    #[test]
    fn identity_channel_pre_eq_round_trip() {
        let c = cfg();
        let s = SensorLinkState { profile: MultipathProfile::identity(), ..SensorLinkState::ideal() };
        let h = effective_channel_oracle::<f64>(&s, Direction::Downlink, 0.0, 0.0, &c);
        let x = map_pam(&vec![-0.25; c.used_count()], 1.0, &c).unwrap();
        assert_eq!(pre_equalize(&x, 0.0, 0.0, &h, 10.0, &c).unwrap().symbol, x);
    }

    #[test]
    fn event_order() {
        use EventKind::*;
        let ev = |kind| ProtocolEvent { kind, round: 0, payload: EventPayload::Frame { start_sample: 0, len: 0 } };
        let good =
            [DlTrigger, UlPreEqAck, CtrlBroadcast, DlOtaRequest, UlOtaFrame, DlOtaRequest, DlOtaRequest, UlOtaFrame];
        validate_sequence(&good.map(ev)).unwrap();
        assert!(validate_sequence(&[DlTrigger, DlOtaRequest].map(ev)).is_err());
        assert!(validate_sequence(&[UlPreEqAck].map(ev)).is_err());
    }
}
