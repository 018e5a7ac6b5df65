use airfed_core::channel::{PhyConfig, SensorLinkState};
use airfed_core::fl::{gen_rss_map, train, ExactAggregator, OtaAggregator, RssMapConfig, TrainConfig};
use airfed_core::protocol::ProtocolConfig;

#[test]
fn ideal_links_follow_the_offline_trajectory() {
    let map = RssMapConfig { n_samples: 400, ..RssMapConfig::default() };
    let (_, sets, _) = gen_rss_map(&map, 3).unwrap();
    let cfg = TrainConfig { rounds: 100, batch: 50, ..TrainConfig::default() };
    let phy = PhyConfig { m_cfo_init: 20_000, ..PhyConfig::default() };
    let proto = ProtocolConfig { snr_db: None, ..ProtocolConfig::default() };

    let offline = train(&sets, &cfg, &mut ExactAggregator, |_, _| {}).unwrap();
    let links = vec![SensorLinkState::ideal(); sets.len()];
    let mut agg = OtaAggregator::<f64>::new(phy, proto, links, offline.model.n_params(), 1).unwrap();
    let ota = train(&sets, &cfg, &mut agg, |_, _| {}).unwrap();

    for (a, b) in ota.rounds.iter().zip(&offline.rounds) {
        assert!((a.loss - b.loss).abs() < 1e-9, "round {}: {} vs {}", a.t, a.loss, b.loss);
        assert!(!a.rejected);
    }
    assert!(offline.final_loss() < offline.rounds[0].loss);
}

#[test]
fn f32_session_aggregates_close_to_exact() {
    let map = RssMapConfig { n_samples: 200, ..RssMapConfig::default() };
    let (_, sets, _) = gen_rss_map(&map, 4).unwrap();
    let cfg = TrainConfig { rounds: 5, batch: 20, ..TrainConfig::default() };
    let phy = PhyConfig { m_cfo_init: 20_000, ..PhyConfig::default() };
    let proto = ProtocolConfig { snr_db: None, ..ProtocolConfig::default() };
    let links = vec![SensorLinkState::ideal(); sets.len()];
    let mut agg = OtaAggregator::<f32>::new(phy, proto, links, 501, 2).unwrap();
    let report = train(&sets, &cfg, &mut agg, |_, _| {}).unwrap();
    for r in &report.rounds {
        assert!(r.agg_nmse.unwrap() < 1e-10, "round {}: {:?}", r.t, r.agg_nmse);
    }
}
