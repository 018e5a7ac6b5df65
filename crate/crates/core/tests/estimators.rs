use airfed_core::channel::{
    effective_channel_oracle, split_offset, Direction, ImpairmentConfig, PhyConfig, SensorLinkState,
};
use airfed_core::dsp::centered_carrier;
use airfed_core::fl::{chunk_payload, dechunk_payload};
use airfed_core::num::wrap_angle;
use airfed_core::ofdm::{demap_pam, map_pam, FreqChannelEstimate, OfdmSymbol};
use airfed_core::protocol::{estimate_phi0, estimate_residual_cfo_sensor, estimate_tau0, pre_equalize};
use approx::assert_abs_diff_eq;
use num_complex::Complex;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TWO_PI: f64 = 2.0 * std::f64::consts::PI;

fn links(seed: u64, k: usize) -> (PhyConfig, Vec<SensorLinkState>) {
    let phy = PhyConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let links = (0..k).map(|_| ImpairmentConfig::default().draw(&phy, &mut rng)).collect();
    (phy, links)
}

/// `H_UL / H_DL` for one link: what the AP sees of a symbol pre-equalized by the downlink channel alone.
fn ota_ratio(link: &SensorLinkState, dfr: f64, t_dl: f64, t_ul: f64, phy: &PhyConfig) -> FreqChannelEstimate<f64> {
    let dl = effective_channel_oracle::<f64>(link, Direction::Downlink, t_dl, dfr, phy);
    let ul = effective_channel_oracle::<f64>(link, Direction::Uplink, t_ul, dfr, phy);
    let h = ul.h.iter().zip(&dl.h).map(|(u, d)| u / d).collect();
    FreqChannelEstimate::new(h, ul.valid.clone(), t_ul, ul.kind)
}

#[test]
fn pre_equalized_uplink_sums_exactly() {
    let (phy, links) = links(3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t_dl, t_ul) = (0.0125, 0.0131);
    let mut rx = OfdmSymbol::<f64>::zeros(phy.n_fft);
    let mut truth = vec![0.0; phy.used_count()];
    for link in &links {
        let dfr: f64 = rng.random_range(-50.0..50.0);
        let x: Vec<f64> = (0..phy.used_count()).map(|_| rng.random_range(-1.0..=1.0)).collect();
        for (t, v) in truth.iter_mut().zip(&x) {
            *t += v;
        }
        let sym = map_pam(&x, 3f64.sqrt(), &phy).unwrap();
        let phi = -TWO_PI * dfr * (t_dl + t_ul);
        let tau = link.to_ul_s - link.to_dl_s;
        let h_dl = effective_channel_oracle::<f64>(link, Direction::Downlink, t_dl, dfr, &phy);
        let pre = pre_equalize(&sym, phi, tau, &h_dl, 1e9, &phy).unwrap();
        assert_eq!(pre.deep_fades, 0);
        let h_ul = effective_channel_oracle::<f64>(link, Direction::Uplink, t_ul, dfr, &phy);
        let through =
            OfdmSymbol::new(pre.symbol.freq.iter().zip(&h_ul.h).map(|(a, b)| a * b).collect(), pre.symbol.modulation);
        rx = rx.superpose(&through);
    }
    let got = demap_pam(&rx, 3f64.sqrt(), &phy);
    let err = got.iter().zip(&truth).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-9, "max error {err}");
}

#[test]
fn stage_one_estimators_recover_ground_truth() {
    let (phy, links) = links(21, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for link in &links {
        let dfr: f64 = rng.random_range(-5.0..5.0);
        let (t_dl, t_ul) = (rng.random_range(0.0..0.1), rng.random_range(0.1..0.2));
        let h = ota_ratio(link, dfr, t_dl, t_ul, &phy);
        let phi = estimate_phi0(&h).unwrap();
        let tau = estimate_tau0(&h, &phy).unwrap();
        let phi_true = -TWO_PI * dfr * (t_dl + t_ul);
        assert!(wrap_angle(phi - phi_true).abs() < 1e-9, "phi {phi} vs {phi_true}");
        assert!(((tau - (link.to_ul_s - link.to_dl_s)) * phy.fs_hz).abs() < 1e-9);
    }
}

#[test]
fn residual_cfo_from_two_downlink_estimates() {
    let (phy, links) = links(5, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for link in &links {
        let dfr: f64 = rng.random_range(-200.0..200.0);
        let t0 = rng.random_range(0.0..1.0);
        let dt = 1e-3;
        let a = effective_channel_oracle::<f64>(link, Direction::Downlink, t0, dfr, &phy);
        let b = effective_channel_oracle::<f64>(link, Direction::Downlink, t0 + dt, dfr, &phy);
        let est = estimate_residual_cfo_sensor(&a, &b, dt).unwrap();
        assert_abs_diff_eq!(est, dfr, epsilon = 1e-9);
    }
}

#[test]
fn phi0_pairs_carriers_symmetrically() {
    let phy = PhyConfig::default();
    let n = phy.n_fft;
    let h = (0..n).map(|i| Complex::from_polar(0.5, 0.3 + 0.02 * centered_carrier(i, n) as f64)).collect();
    let h = FreqChannelEstimate::new(h, vec![true; n], 0.0, airfed_core::ofdm::ChannelKind::Ota);
    assert_abs_diff_eq!(estimate_phi0(&h).unwrap(), 0.3, epsilon = 1e-12);
}

proptest! {
    #[test]
    fn split_offset_recombines(samples in -31.9f64..31.9) {
        let phy = PhyConfig::default();
        let (whole, frac) = split_offset(samples * phy.ts(), phy.fs_hz);
        prop_assert!(frac.abs() < 1.0);
        prop_assert!(whole == 0 || frac == 0.0 || whole.signum() as f64 == frac.signum());
        prop_assert!((whole as f64 + frac - samples).abs() < 1e-9);
    }

    #[test]
    fn pam_round_trip(seed in any::<u64>()) {
        let phy = PhyConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..phy.used_count()).map(|_| rng.random_range(-1.0..=1.0)).collect();
        let back = demap_pam(&map_pam(&x, 3f64.sqrt(), &phy).unwrap(), 3f64.sqrt(), &phy);
        for (a, b) in back.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn chunking_round_trips_below_the_clip(g in prop::collection::vec(-10.0f64..10.0, 1..700), per in 1usize..300) {
        let scale = 0.1;
        let p = chunk_payload(&g, scale, per).unwrap();
        prop_assert_eq!(p.clipped, 0);
        prop_assert!(p.chunks.iter().all(|c| c.len() == per));
        let back = dechunk_payload(&p.chunks.concat(), g.len(), scale).unwrap();
        for (a, b) in back.iter().zip(&g) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
