//! Sample-level simulation of the handshake between one AP and `K` sensors.
//!
//! Time is a global sample counter. Every frame is simulated as an isolated
//! burst stamped with its start time, so idle air time costs nothing. Sensor
//! clocks run on the same counter; sensors time their uplink bursts by their
//! clock, the AP demodulates at its own schedule and never needs to detect
//! the superposed uplink.

use num_complex::Complex;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    estimate_phi0, estimate_residual_cfo_sensor, estimate_tau0, pre_equalize, update_phi, update_tau, EventKind,
    EventPayload, PreEqState, ProtocolEvent,
};
use crate::channel::{add_noise, apply_multipath, apply_timing_offset, rotate_in_place, split_offset};
use crate::channel::{PhyConfig, SampleStream, SensorLinkState};
use crate::error::{Error, Result};
use crate::framing::{detect_frame_within, gen_cfo_subframe, gen_ft, FrameLayout, FtSequence, CFO, DATA, PILOTS};
use crate::num::{cis, lit, to_f64, Real};
use crate::ofdm::{average_estimates, ls_channel_estimate, map_pam, ChannelKind, FreqChannelEstimate};
use crate::ofdm::{ramp_symbol, OfdmEngine, OfdmSymbol, PilotPlan};
use crate::sync::{coarse_cfo_estimate, needs_recorrection, track_residual_cfo, CfoEstimate};

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

/// Link-level protocol settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    /// Per-carrier SNR of a unit-power transmission at every receiver; `None` is noise-free.
    pub snr_db: Option<f64>,
    /// Samples between consecutive downlink slots.
    pub round_period_samples: u64,
    /// Samples from a downlink slot to the uplink burst of the same round.
    pub ul_latency_samples: u64,
    /// Silence captured before an expected frame; detection searches `2·lead` starts.
    pub lead_samples: usize,
    /// PAM data symbols per OTA frame.
    pub ota_symbols: usize,
    pub a_pam: f64,
    /// Largest mean power amplification a pre-equalizer may apply.
    pub power_cap: f64,
    /// Apply the `φ̂`/`τ̂` correction; without it sensors invert `ĥ_DL` only.
    pub compensation: bool,
    /// Cap on the number of past downlink estimates averaged into the reference (≤ 1 disables).
    pub dl_smoothing: usize,
    /// Advance `φ̂` to the air time of each OTA symbol using the tracked residual CFO.
    pub phase_extrapolation: bool,
    /// Failed attempts allowed per stage before the session aborts.
    pub retries: usize,
    pub ft_seed: u64,
    pub pilot_seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            snr_db: Some(20.0),
            round_period_samples: 15_360,
            ul_latency_samples: 7_680,
            lead_samples: 32,
            ota_symbols: 4,
            a_pam: 3f64.sqrt(),
            power_cap: 10.0,
            compensation: true,
            dl_smoothing: 32,
            phase_extrapolation: true,
            retries: 1,
            ft_seed: 0x4654,
            pilot_seed: 0x5049,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self, phy: &PhyConfig, k_sensors: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if k_sensors == 0 {
            return bad("at least one sensor is required".into());
        }
        if let Some(s) = self.snr_db {
            if !s.is_finite() {
                return bad(format!("snr_db must be finite, got {s}"));
            }
        }
        if self.lead_samples == 0 {
            return bad("lead_samples must be positive".into());
        }
        if self.ota_symbols == 0 {
            return bad("ota_symbols must be positive".into());
        }
        if !(self.a_pam > 0.0 && self.power_cap > 0.0) {
            return bad("a_pam and power_cap must be positive".into());
        }
        let dl_len = FrameLayout::digital_frame(phy, k_sensors, 0).total_len() as u64;
        let ul_len = FrameLayout::ota_frame(phy, self.ota_symbols).total_len().max(dl_len as usize) as u64;
        let guard = 2 * (self.lead_samples as u64 + phy.cp_len as u64);
        if self.ul_latency_samples < dl_len + guard {
            return bad(format!("ul_latency_samples {} shorter than the downlink frame", self.ul_latency_samples));
        }
        if self.round_period_samples < self.ul_latency_samples + ul_len + guard {
            return bad(format!("round_period_samples {} cannot hold a round", self.round_period_samples));
        }
        Ok(())
    }

    /// Per-sample noise variance: a unit-power carrier maps to `1/N` sample power.
    pub fn noise_var(&self, phy: &PhyConfig) -> f64 {
        match self.snr_db {
            Some(db) => 1.0 / (phy.n_fft as f64 * crate::channel::db_to_linear(db)),
            None => 0.0,
        }
    }
}

/// Result of the pre-equalization stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOneTrace {
    pub attempts: usize,
    pub coarse_cfo_hz: Vec<f64>,
    pub phi0: Vec<f64>,
    pub tau0_samples: Vec<f64>,
    /// `τ` implied by the simulated offsets and the detected frame start.
    pub tau0_true_samples: Vec<f64>,
    pub amplification: Vec<f64>,
}

/// Per-sensor diagnostics of one OTA round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensorRoundTrace {
    pub sensor: usize,
    /// Detected minus true downlink frame start.
    pub sync_error: i64,
    pub peak: f64,
    pub to_step: i64,
    pub phi_hat: f64,
    pub tau_hat_samples: f64,
    pub dfr_single_hz: f64,
    pub dfr_mean_hz: f64,
    pub dfr_true_hz: f64,
    pub amplification: f64,
    pub deep_fades: usize,
    pub guard_warning: bool,
    pub recorrection: bool,
}

/// Outcome of one OTA aggregation round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundOutcome {
    pub round: usize,
    pub attempts: usize,
    pub failures: Vec<String>,
    /// Demapped aggregate, `ota_symbols·used_count` values.
    pub aggregate: Vec<f64>,
    /// Mean of the common-pilot channel seen by the AP divided by `K` (ideally 1).
    pub pilot_gain: [f64; 2],
    pub sensors: Vec<SensorRoundTrace>,
}

#[derive(Debug, Clone)]
struct SensorRuntime<T: Real> {
    coarse_hz: f64,
    tracker: CfoEstimate<T>,
    pre: PreEqState<T>,
    ref_count: usize,
    cum_step: i64,
    /// Air-time offset (samples into the uplink frame) the AP measured `φ̂_0` at.
    phi_ref_offset: usize,
}

struct DlReception<T: Real> {
    m0: usize,
    peak: f64,
    t_dl: f64,
    h: FreqChannelEstimate<T>,
    first_pilot: OfdmSymbol<T>,
}

/// One uplink frame section as the sensor hands it to its transmitter.
enum UlPart<T: Real> {
    Time(Vec<Complex<T>>),
    Symbols(Vec<OfdmSymbol<T>>),
}

/// Handshake state machine for one AP and its sensors.
pub struct OtaSession<T: Real> {
    phy: PhyConfig,
    cfg: ProtocolConfig,
    links: Vec<SensorLinkState>,
    engine: OfdmEngine<T>,
    ft: FtSequence,
    pilots: PilotPlan<T>,
    common_pilot: OfdmSymbol<T>,
    dl_layout: FrameLayout,
    dl_frame: Vec<Complex<T>>,
    max_delay: usize,
    noise_var: f64,
    rng: ChaCha8Rng,
    sensors: Vec<SensorRuntime<T>>,
    next_slot: u64,
    round: usize,
    stage_one_done: bool,
    events: Vec<ProtocolEvent>,
}

impl<T: Real> OtaSession<T> {
    pub fn new(phy: PhyConfig, cfg: ProtocolConfig, links: Vec<SensorLinkState>, seed: u64) -> Result<Self> {
        phy.validate()?;
        cfg.validate(&phy, links.len())?;
        let mut max_delay = 0;
        for l in &links {
            l.validate(&phy, phy.coarse_cfo_range_hz())?;
            max_delay = max_delay.max(l.profile.sample_delays(&phy)?.into_iter().max().unwrap_or(0));
        }
        let k = links.len();
        let ft = gen_ft(&phy, cfg.ft_seed)?;
        let pilots = PilotPlan::new(k, cfg.pilot_seed, &phy);
        let common_pilot = PilotPlan::new(1, cfg.pilot_seed.wrapping_add(0x9E37_79B9), &phy).pilot_symbols.remove(0);
        let engine = OfdmEngine::new(&phy);
        let amp: T = lit(1.0 / (phy.n_fft as f64).sqrt());
        let dl_layout = FrameLayout::digital_frame(&phy, k, 0);
        let mut dl_frame = ft.to_stream(amp).samples;
        dl_frame.extend(gen_cfo_subframe(&phy, phy.m_cfo_frame, amp)?.samples);
        for j in 0..k {
            dl_frame.extend(engine.modulate(pilots.pilot(j)));
        }
        debug_assert_eq!(dl_frame.len(), dl_layout.total_len());
        let noise_var = cfg.noise_var(&phy);
        let sensors = (0..k)
            .map(|_| SensorRuntime {
                coarse_hz: 0.0,
                tracker: CfoEstimate::new(0.0),
                pre: PreEqState::default(),
                ref_count: 0,
                cum_step: 0,
                phi_ref_offset: 0,
            })
            .collect();
        Ok(Self {
            phy,
            cfg,
            links,
            engine,
            ft,
            pilots,
            common_pilot,
            dl_layout,
            dl_frame,
            max_delay,
            noise_var,
            rng: ChaCha8Rng::seed_from_u64(seed),
            sensors,
            next_slot: 0,
            round: 0,
            stage_one_done: false,
            events: Vec::new(),
        })
    }

    pub fn events(&self) -> &[ProtocolEvent] {
        &self.events
    }

    pub fn links(&self) -> &[SensorLinkState] {
        &self.links
    }

    pub fn round_index(&self) -> usize {
        self.round
    }

    /// Values carried by one OTA frame per sensor.
    pub fn payload_len(&self) -> usize {
        self.cfg.ota_symbols * self.phy.used_count()
    }

    fn ts(&self) -> f64 {
        self.phy.ts()
    }

    fn amp(&self) -> T {
        lit(1.0 / (self.phy.n_fft as f64).sqrt())
    }

    /// Propagates `frame` (AP time `slot`) to sensor `k` and applies its coarse correction.
    fn dl_air(&mut self, k: usize, frame: &[Complex<T>], slot: u64, coarse_hz: f64) -> Result<SampleStream<T>> {
        let lead = self.cfg.lead_samples;
        let mut seg = vec![Complex::new(T::zero(), T::zero()); lead];
        seg.extend_from_slice(frame);
        seg.resize(seg.len() + lead + self.max_delay, Complex::new(T::zero(), T::zero()));
        let t0 = (slot - lead as u64) as f64 * self.ts();
        let link = &self.links[k];
        let mut y = apply_multipath(&SampleStream::new(seg, t0), &link.profile, &self.phy)?;
        rotate_in_place(&mut y.samples, link.cfo_hz, t0, self.phy.fs_hz);
        add_noise(&mut y.samples, self.noise_var, &mut self.rng);
        rotate_in_place(&mut y.samples, -coarse_hz, t0, self.phy.fs_hz);
        Ok(y)
    }

    fn detect(&self, y: &SampleStream<T>) -> Result<(usize, f64)> {
        let d = detect_frame_within(&y.samples, &self.ft, &self.phy, 2 * self.cfg.lead_samples)?;
        if !d.valid {
            return Err(Error::DetectionFailed { peak: d.peak, threshold: self.phy.gamma_th() });
        }
        Ok((d.m0, d.peak))
    }

    /// Runs the initialization preamble: every sensor estimates its coarse CFO.
    pub fn initialize(&mut self) -> Result<Vec<f64>> {
        let layout = FrameLayout::init_preamble(&self.phy);
        let amp = self.amp();
        let mut frame = self.ft.to_stream(amp).samples;
        frame.extend(
            gen_cfo_subframe(&self.phy, layout.section(CFO).expect("preamble has a tone").length, amp)?.samples,
        );
        let slot = self.cfg.lead_samples as u64;
        let mut out = Vec::with_capacity(self.links.len());
        for k in 0..self.links.len() {
            let y = self.dl_air(k, &frame, slot, 0.0)?;
            let (m0, _) = self.detect(&y)?;
            let start = m0 + self.phy.m_ft;
            let tone = SampleStream::new(y.samples[start..].to_vec(), 0.0);
            let est = coarse_cfo_estimate(&tone, &self.phy)?;
            self.sensors[k].coarse_hz = est;
            self.sensors[k].tracker = CfoEstimate::new(est);
            out.push(est);
        }
        self.next_slot = slot + layout.total_len() as u64 + self.cfg.round_period_samples;
        Ok(out)
    }

    /// Sets the coarse CFO estimates directly, skipping the preamble.
    pub fn set_coarse(&mut self, coarse_hz: &[f64]) {
        for (s, &c) in self.sensors.iter_mut().zip(coarse_hz) {
            s.coarse_hz = c;
            s.tracker = CfoEstimate::new(c);
        }
        let min_slot = self.cfg.lead_samples as u64 + self.cfg.round_period_samples;
        self.next_slot = self.next_slot.max(min_slot);
    }

    fn receive_dl(&mut self, k: usize, slot: u64) -> Result<DlReception<T>> {
        let frame = std::mem::take(&mut self.dl_frame);
        let coarse = self.sensors[k].coarse_hz;
        let y = self.dl_air(k, &frame, slot, coarse);
        self.dl_frame = frame;
        let y = y?;
        let (m0, peak) = self.detect(&y)?;
        let (whole, frac) = split_offset(self.links[k].to_dl_s, self.phy.fs_hz);
        let lead = self.cfg.lead_samples;
        let t_dl = (slot - lead as u64 + m0 as u64) as f64 * self.ts();
        let mut estimates = Vec::with_capacity(self.pilots.k_sensors());
        let mut first_pilot = None;
        for j in 0..self.pilots.k_sensors() {
            let off = self.dl_layout.symbol_offset(PILOTS, j, &self.phy).expect("pilot slot exists");
            let sym = self.window(&y.samples, m0 as i64 + off as i64 + whole, frac)?;
            estimates.push(ls_channel_estimate(&sym, self.pilots.pilot(j), t_dl, &self.phy)?);
            if j == 0 {
                first_pilot = Some(sym);
            }
        }
        let h = average_estimates(&estimates).expect("at least one pilot");
        Ok(DlReception { m0, peak, t_dl, h, first_pilot: first_pilot.expect("at least one pilot") })
    }

    /// DFT window of the OFDM symbol whose prefix starts at `sym_start`, backed
    /// off into the prefix, followed by the fractional sampling-offset ramp.
    fn window(&self, r: &[Complex<T>], sym_start: i64, frac: f64) -> Result<OfdmSymbol<T>> {
        let start = sym_start + self.phy.cp_len as i64 - self.phy.window_backoff as i64;
        if start < 0 {
            return Err(Error::TooShort { needed: (-start) as usize, got: 0 });
        }
        let mut sym = self.engine.demodulate_window(r, start as usize)?;
        ramp_symbol(&mut sym, frac);
        Ok(sym)
    }

    /// Sensor `k`'s uplink burst as it arrives at the AP, placed in an AP capture
    /// buffer that starts `lead` samples before `slot`.
    fn ul_air(&self, k: usize, parts: Vec<UlPart<T>>, slot: u64, buf: &mut [Complex<T>]) -> Result<()> {
        let link = &self.links[k];
        let (whole, frac) = split_offset(link.to_ul_s, self.phy.fs_hz);
        let mut burst = Vec::new();
        for part in parts {
            match part {
                UlPart::Time(v) => {
                    let shifted = apply_timing_offset(&SampleStream::new(v, 0.0), frac * self.ts(), &self.phy)?;
                    burst.extend(shifted.samples);
                }
                UlPart::Symbols(syms) => {
                    for mut s in syms {
                        ramp_symbol(&mut s, frac);
                        burst.extend(self.engine.modulate(&s));
                    }
                }
            }
        }
        let start = self.cfg.lead_samples as i64 - whole;
        let t0 = (slot as i64 - whole) as f64 * self.ts();
        // Sensor-side coarse pre-rotation and the oscillator offset combine into −Δf_r.
        rotate_in_place(&mut burst, self.sensors[k].coarse_hz - link.cfo_hz, t0, self.phy.fs_hz);
        let y = apply_multipath(&SampleStream::new(burst, t0), &link.profile, &self.phy)?;
        if start < 0 || start as usize + y.len() > buf.len() {
            return Err(Error::TooShort { needed: start.max(0) as usize + y.len(), got: buf.len() });
        }
        for (a, b) in buf[start as usize..].iter_mut().zip(&y.samples) {
            *a = *a + *b;
        }
        Ok(())
    }

    fn ap_buffer(&self, frame_len: usize) -> Vec<Complex<T>> {
        let len = 2 * self.cfg.lead_samples + frame_len + self.max_delay + self.phy.cp_len;
        vec![Complex::new(T::zero(), T::zero()); len]
    }

    fn log(&mut self, kind: EventKind, payload: EventPayload) {
        self.events.push(ProtocolEvent { kind, round: self.round, payload });
    }

    /// Pre-equalization stage: downlink trigger, pre-equalized acknowledgments
    /// with orthogonal pilots, and the AP's `(φ̂_0, τ̂_0)` per sensor.
    pub fn pre_equalization_stage(&mut self) -> Result<StageOneTrace> {
        if self.next_slot == 0 {
            self.set_coarse(&vec![0.0; self.links.len()]);
        }
        let mut failures = Vec::new();
        for attempt in 1..=self.cfg.retries + 1 {
            let slot = self.next_slot;
            self.next_slot += self.cfg.round_period_samples;
            self.log(EventKind::DlTrigger, EventPayload::Frame { start_sample: slot, len: self.dl_frame.len() });
            match self.try_stage_one(slot) {
                Ok(mut trace) => {
                    trace.attempts = attempt;
                    self.stage_one_done = true;
                    return Ok(trace);
                }
                Err(e) if recoverable(&e) => failures.push(e.to_string()),
                Err(e) => return Err(e),
            }
        }
        Err(Error::ProtocolAbort { round: 0, reason: failures.join("; ") })
    }

    fn try_stage_one(&mut self, slot: u64) -> Result<StageOneTrace> {
        let k_count = self.links.len();
        let mut rx = Vec::with_capacity(k_count);
        for k in 0..k_count {
            rx.push(self.receive_dl(k, slot)?);
        }
        let ul_slot = slot + self.cfg.ul_latency_samples;
        let layout = FrameLayout::digital_frame(&self.phy, k_count, 0);
        let mut buf = self.ap_buffer(layout.total_len());
        let amp = self.amp();
        let mut amplification = Vec::with_capacity(k_count);
        for (k, r) in rx.iter().enumerate() {
            let tx = pre_equalize(self.pilots.pilot(k), 0.0, 0.0, &r.h, self.cfg.power_cap, &self.phy)?;
            if tx.power_capped {
                return Err(power_cap_error(k, tx.amplification, self.cfg.power_cap));
            }
            amplification.push(tx.amplification);
            let mut slots = vec![OfdmSymbol::zeros(self.phy.n_fft); k_count];
            slots[self.pilots.slot_of(k)] = tx.symbol;
            let parts = vec![
                UlPart::Time(self.ft.to_stream(amp).samples),
                UlPart::Time(gen_cfo_subframe(&self.phy, self.phy.m_cfo_frame, amp)?.samples),
                UlPart::Symbols(slots),
            ];
            self.ul_air(k, parts, ul_slot, &mut buf)?;
        }
        add_noise(&mut buf, self.noise_var, &mut self.rng);
        let base = self.cfg.lead_samples as i64;
        let mut phi0 = Vec::with_capacity(k_count);
        let mut tau0 = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let off = layout.symbol_offset(PILOTS, self.pilots.slot_of(k), &self.phy).expect("slot exists");
            let sym = self.window(&buf, base + off as i64, 0.0)?;
            let mut h = ls_channel_estimate(&sym, self.pilots.pilot(k), ul_slot as f64 * self.ts(), &self.phy)?;
            h.kind = ChannelKind::Ota;
            phi0.push(estimate_phi0(&h)?);
            tau0.push(estimate_tau0(&h, &self.phy)?);
        }
        self.log(EventKind::UlPreEqAck, EventPayload::Frame { start_sample: ul_slot, len: layout.total_len() });

        let lead = self.cfg.lead_samples as i64;
        let t_ul = ul_slot as f64 * self.ts();
        let mut tau0_true = Vec::with_capacity(k_count);
        for (k, r) in rx.into_iter().enumerate() {
            let ref_offset = layout.symbol_offset(PILOTS, self.pilots.slot_of(k), &self.phy).expect("slot exists");
            let link = &self.links[k];
            tau0_true.push((link.to_ul_s - link.to_dl_s) * self.phy.fs_hz - (r.m0 as i64 - lead) as f64);
            let s = &mut self.sensors[k];
            s.tracker = track_residual_cfo(&CfoEstimate::new(s.coarse_hz), &r.first_pilot, r.t_dl)?;
            s.pre = PreEqState {
                phi_hat: 0.0,
                tau_hat_s: 0.0,
                dfr_hat_hz: 0.0,
                h_dl_prev: Some(r.h),
                t_dl_prev: r.t_dl,
                t_ul_prev: t_ul,
                round_i: 0,
            };
            s.ref_count = 1;
            s.cum_step = 0;
            s.phi_ref_offset = ref_offset;
        }
        // The control broadcast itself rides on the first OTA request.
        for (s, (&p, &t)) in self.sensors.iter_mut().zip(phi0.iter().zip(&tau0)) {
            s.pre.phi_hat = p;
            s.pre.tau_hat_s = t;
        }
        Ok(StageOneTrace {
            attempts: 0,
            coarse_cfo_hz: self.sensors.iter().map(|s| s.coarse_hz).collect(),
            phi0,
            tau0_samples: tau0.iter().map(|t| t * self.phy.fs_hz).collect(),
            tau0_true_samples: tau0_true,
            amplification,
        })
    }

    /// One OTA aggregation round. `payloads[k]` holds `payload_len()` values in `[-1, 1]`.
    pub fn round(&mut self, payloads: &[Vec<f64>]) -> Result<RoundOutcome> {
        if !self.stage_one_done {
            return Err(Error::Config("pre-equalization stage has not run".into()));
        }
        if payloads.len() != self.links.len() {
            return Err(Error::LengthMismatch { expected: self.links.len(), got: payloads.len() });
        }
        for p in payloads {
            if p.len() != self.payload_len() {
                return Err(Error::LengthMismatch { expected: self.payload_len(), got: p.len() });
            }
        }
        self.round += 1;
        if self.round == 1 {
            let phi0 = self.sensors.iter().map(|s| s.pre.phi_hat).collect();
            let tau0_s = self.sensors.iter().map(|s| s.pre.tau_hat_s).collect();
            self.log(EventKind::CtrlBroadcast, EventPayload::Control { phi0, tau0_s });
        }
        let mut failures = Vec::new();
        for attempt in 1..=self.cfg.retries + 1 {
            let slot = self.next_slot;
            self.next_slot += self.cfg.round_period_samples;
            self.log(EventKind::DlOtaRequest, EventPayload::Frame { start_sample: slot, len: self.dl_frame.len() });
            match self.try_round(slot, payloads) {
                Ok(mut out) => {
                    out.attempts = attempt;
                    out.failures = failures;
                    return Ok(out);
                }
                Err(e) if recoverable(&e) => failures.push(e.to_string()),
                Err(e) => return Err(e),
            }
        }
        Err(Error::ProtocolAbort { round: self.round, reason: failures.join("; ") })
    }

    fn try_round(&mut self, slot: u64, payloads: &[Vec<f64>]) -> Result<RoundOutcome> {
        let k_count = self.links.len();
        let ts = self.ts();
        let ul_slot = slot + self.cfg.ul_latency_samples;
        let t_ul = ul_slot as f64 * ts;
        let layout = FrameLayout::ota_frame(&self.phy, self.cfg.ota_symbols);
        let used = self.phy.used_count();
        let a_pam: T = lit(self.cfg.a_pam);
        let lead = self.cfg.lead_samples as i64;
        let kappa_guard = self.phy.kappa as f64 * self.phy.n_fft as f64 * ts;

        let mut next_states = Vec::with_capacity(k_count);
        let mut bursts = Vec::with_capacity(k_count);
        let mut traces = Vec::with_capacity(k_count);
        for k in 0..k_count {
            let dl = self.receive_dl(k, slot)?;
            let mut s = self.sensors[k].clone();
            let h_ref = s.pre.h_dl_prev.take().expect("stage one stored a reference");
            let dt_dl = dl.t_dl - s.pre.t_dl_prev;
            let dt_ul = t_ul - s.pre.t_ul_prev;
            let (tau, step) = update_tau(s.pre.tau_hat_s, &h_ref, &dl.h, &self.phy)?;
            let h_ref = h_ref.ramped(lit(step as f64));
            let dfr = estimate_residual_cfo_sensor(&h_ref, &dl.h, dt_dl)?;
            s.cum_step += step;
            let mut aligned = dl.first_pilot.clone();
            ramp_symbol(&mut aligned, -(s.cum_step as f64));
            s.tracker = track_residual_cfo(&s.tracker, &aligned, dl.t_dl)?;
            let phi = update_phi(s.pre.phi_hat, dfr, dt_dl, dt_ul);
            let h_now = smooth(&h_ref, &dl.h, s.ref_count.min(self.cfg.dl_smoothing));
            s.ref_count += 1;

            let mean_dfr = s.tracker.residual_hz;
            let recorrection = needs_recorrection(&s.tracker, dt_dl);
            let guard_warning = !(kappa_guard * mean_dfr.abs() < 0.01);
            let (phi_tx, tau_tx) = if self.cfg.compensation { (phi, tau) } else { (0.0, 0.0) };
            let rate = if self.cfg.compensation && self.cfg.phase_extrapolation { mean_dfr } else { 0.0 };
            let phase_at = |off: usize| phi_tx - TWO_PI * rate * (off as f64 - s.phi_ref_offset as f64) * ts;

            let mut syms = Vec::with_capacity(self.cfg.ota_symbols + 1);
            let pilot_off = layout.symbol_offset(PILOTS, 0, &self.phy).expect("ota pilot");
            let tx =
                pre_equalize(&self.common_pilot, phase_at(pilot_off), tau_tx, &h_now, self.cfg.power_cap, &self.phy)?;
            let (amplification, deep_fades) = (tx.amplification, tx.deep_fades);
            if tx.power_capped {
                return Err(power_cap_error(k, tx.amplification, self.cfg.power_cap));
            }
            syms.push(tx.symbol);
            for (j, chunk) in payloads[k].chunks(used).enumerate() {
                let values: Vec<T> = chunk.iter().map(|&v| lit(v)).collect();
                let x = map_pam(&values, a_pam, &self.phy)?;
                let off = layout.symbol_offset(DATA, j, &self.phy).expect("data slot");
                let tx = pre_equalize(&x, phase_at(off), tau_tx, &h_now, self.cfg.power_cap, &self.phy)?;
                syms.push(tx.symbol);
            }
            bursts.push(syms);

            let link = &self.links[k];
            traces.push(SensorRoundTrace {
                sensor: k,
                sync_error: dl.m0 as i64 - lead,
                peak: dl.peak,
                to_step: step,
                phi_hat: phi,
                tau_hat_samples: tau * self.phy.fs_hz,
                dfr_single_hz: dfr,
                dfr_mean_hz: mean_dfr,
                dfr_true_hz: link.cfo_hz - s.coarse_hz,
                amplification,
                deep_fades,
                guard_warning,
                recorrection,
            });
            s.pre = PreEqState {
                phi_hat: phi,
                tau_hat_s: tau,
                dfr_hat_hz: dfr,
                h_dl_prev: Some(h_now),
                t_dl_prev: dl.t_dl,
                t_ul_prev: t_ul,
                round_i: self.round,
            };
            next_states.push(s);
        }

        let mut buf = self.ap_buffer(layout.total_len());
        let amp = self.amp();
        for (k, syms) in bursts.into_iter().enumerate() {
            let parts = vec![UlPart::Time(self.ft.to_stream(amp).samples), UlPart::Symbols(syms)];
            self.ul_air(k, parts, ul_slot, &mut buf)?;
        }
        add_noise(&mut buf, self.noise_var, &mut self.rng);
        self.log(EventKind::UlOtaFrame, EventPayload::Frame { start_sample: ul_slot, len: layout.total_len() });

        let pilot_off = layout.symbol_offset(PILOTS, 0, &self.phy).expect("ota pilot");
        let rx_pilot = self.window(&buf, lead + pilot_off as i64, 0.0)?;
        let h_agg = ls_channel_estimate(&rx_pilot, &self.common_pilot, t_ul, &self.phy)?;
        let mean =
            self.phy.used_positions().iter().fold(Complex::new(0.0, 0.0), |acc, &i| {
                acc + Complex::new(to_f64(h_agg.h[i].re), to_f64(h_agg.h[i].im))
            }) / (used as f64 * k_count as f64);

        let mut aggregate = Vec::with_capacity(self.payload_len());
        for j in 0..self.cfg.ota_symbols {
            let off = layout.symbol_offset(DATA, j, &self.phy).expect("data slot");
            let sym = self.window(&buf, lead + off as i64, 0.0)?;
            aggregate.extend(crate::ofdm::demap_pam(&sym, a_pam, &self.phy).into_iter().map(to_f64));
        }
        self.sensors = next_states;
        Ok(RoundOutcome {
            round: self.round,
            attempts: 0,
            failures: Vec::new(),
            aggregate,
            pilot_gain: [mean.re, mean.im],
            sensors: traces,
        })
    }
}

/// Averages a new estimate into the reference after rotating the reference onto it.
fn smooth<T: Real>(
    reference: &FreqChannelEstimate<T>,
    now: &FreqChannelEstimate<T>,
    weight: usize,
) -> FreqChannelEstimate<T> {
    if weight == 0 {
        return now.clone();
    }
    let rho = (0..now.len())
        .filter(|&i| reference.valid[i] && now.valid[i])
        .fold(Complex::new(0.0, 0.0), |acc, i| {
            let p = reference.h[i].conj() * now.h[i];
            acc + Complex::new(to_f64(p.re), to_f64(p.im))
        })
        .arg();
    let rot: Complex<T> = cis(lit(rho));
    let w: T = lit(weight as f64);
    let norm = T::one() / (w + T::one());
    let mut out = now.clone();
    for i in 0..now.len() {
        out.valid[i] = reference.valid[i] && now.valid[i];
        out.h[i] = (reference.h[i] * rot * w + now.h[i]) * norm;
    }
    out
}

fn power_cap_error(k: usize, amplification: f64, cap: f64) -> Error {
    Error::ProtocolAbort { round: 0, reason: format!("sensor {k}: amplification {amplification:.2} exceeds cap {cap}") }
}

fn recoverable(e: &Error) -> bool {
    matches!(e, Error::DetectionFailed { .. } | Error::SyncLoss { .. } | Error::ProtocolAbort { .. })
}

/// Runs initialization, the pre-equalization stage and `rounds` OTA rounds.
///
/// `payload_source(round, k)` supplies sensor `k`'s values for `round` (1-based).
pub fn run_handshake<T: Real, F>(
    links: Vec<SensorLinkState>,
    phy: &PhyConfig,
    cfg: &ProtocolConfig,
    rounds: usize,
    seed: u64,
    mut payload_source: F,
) -> Result<(StageOneTrace, Vec<RoundOutcome>)>
where
    F: FnMut(usize, usize) -> Vec<f64>,
{
    let k = links.len();
    let mut session = OtaSession::<T>::new(phy.clone(), cfg.clone(), links, seed)?;
    session.initialize()?;
    let stage = session.pre_equalization_stage()?;
    let mut out = Vec::with_capacity(rounds);
    for r in 1..=rounds {
        let payloads: Vec<Vec<f64>> = (0..k).map(|s| payload_source(r, s)).collect();
        out.push(session.round(&payloads)?);
    }
    Ok((stage, out))
}
