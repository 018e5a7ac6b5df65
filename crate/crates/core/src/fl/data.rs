//! Synthetic RSS coverage map and the sensors' training sets.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SHADOW_FEATURES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RssMapConfig {
    /// AP positions in metres, relative to the centre of the measurement circle.
    pub ap_sites: [[f64; 2]; 2],
    pub radius_m: f64,
    /// No samples are taken closer than this to an AP.
    pub exclusion_m: f64,
    /// Received power at `d0_m` from an AP.
    pub p0_dbm: f64,
    pub d0_m: f64,
    pub path_loss_exp: f64,
    pub shadowing_db: f64,
    /// Correlation length of the shadowing field.
    pub shadowing_corr_m: f64,
    pub n_samples: usize,
    pub n_sensors: usize,
}

impl Default for RssMapConfig {
    fn default() -> Self {
        Self {
            ap_sites: [[-120.0, -60.0], [140.0, 80.0]],
            radius_m: 400.0,
            exclusion_m: 20.0,
            p0_dbm: -40.0,
            d0_m: 20.0,
            path_loss_exp: 3.0,
            shadowing_db: 4.0,
            shadowing_corr_m: 60.0,
            n_samples: 2000,
            n_sensors: 2,
        }
    }
}

impl RssMapConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        let [a, b] = self.ap_sites;
        if a == b {
            return bad("AP sites must be distinct");
        }
        if !(self.radius_m > self.exclusion_m && self.exclusion_m >= 0.0 && self.d0_m > 0.0) {
            return bad("radius must exceed the exclusion distance and d0 must be positive");
        }
        if !(self.shadowing_db >= 0.0 && self.shadowing_corr_m > 0.0 && self.path_loss_exp > 0.0) {
            return bad("shadowing and path-loss parameters must be positive");
        }
        if self.n_sensors == 0 || self.n_samples < self.n_sensors {
            return bad("need at least one sample per sensor");
        }
        Ok(())
    }
}

/// Ground-truth RSS field: log-distance path loss from the strongest AP plus a
/// smooth shadowing field built from random Fourier features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssMap {
    pub config: RssMapConfig,
    freqs: Vec<[f64; 2]>,
    phases: Vec<f64>,
}

impl RssMap {
    pub fn new(config: RssMapConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_4144);
        let k = 1.0 / config.shadowing_corr_m;
        let freqs = (0..SHADOW_FEATURES)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                let y: f64 = StandardNormal.sample(&mut rng);
                [x * k, y * k]
            })
            .collect();
        let phases = (0..SHADOW_FEATURES).map(|_| rng.random_range(0.0..std::f64::consts::TAU)).collect();
        Ok(Self { config, freqs, phases })
    }

    pub fn shadowing_db(&self, p: [f64; 2]) -> f64 {
        if self.config.shadowing_db == 0.0 {
            return 0.0;
        }
        let s: f64 = self.freqs.iter().zip(&self.phases).map(|(w, b)| (w[0] * p[0] + w[1] * p[1] + b).cos()).sum();
        self.config.shadowing_db * (2.0 / SHADOW_FEATURES as f64).sqrt() * s
    }

    pub fn path_loss_dbm(&self, p: [f64; 2]) -> f64 {
        let c = &self.config;
        c.ap_sites
            .iter()
            .map(|s| c.p0_dbm - 10.0 * c.path_loss_exp * (dist(p, *s) / c.d0_m).log10())
            .fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn rss_dbm(&self, p: [f64; 2]) -> f64 {
        self.path_loss_dbm(p) + self.shadowing_db(p)
    }

    /// Inside the circle and outside every exclusion disk.
    pub fn measurable(&self, p: [f64; 2]) -> bool {
        let c = &self.config;
        p[0].hypot(p[1]) <= c.radius_m && c.ap_sites.iter().all(|s| dist(p, *s) >= c.exclusion_m)
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Maps positions and RSS to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub radius_m: f64,
    pub rss_min_dbm: f64,
    pub rss_max_dbm: f64,
}

impl Normalizer {
    pub fn position(&self, p: [f64; 2]) -> [f64; 2] {
        let d = 2.0 * self.radius_m;
        [(p[0] + self.radius_m) / d, (p[1] + self.radius_m) / d]
    }

    pub fn rss(&self, dbm: f64) -> f64 {
        (dbm - self.rss_min_dbm) / (self.rss_max_dbm - self.rss_min_dbm)
    }

    pub fn rss_dbm(&self, norm: f64) -> f64 {
        self.rss_min_dbm + norm * (self.rss_max_dbm - self.rss_min_dbm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RssRecord {
    pub lat_norm: f64,
    pub lon_norm: f64,
    pub rss_norm: f64,
}

impl RssRecord {
    pub fn input(&self) -> [f64; 2] {
        [self.lat_norm, self.lon_norm]
    }
}

/// One sensor's local dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssDataset {
    pub owner: usize,
    pub epsilon: f64,
    pub records: Vec<RssRecord>,
}

impl RssDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// Samples the map uniformly over the measurable region and splits the
/// samples evenly across sensors.
pub fn gen_rss_map(config: &RssMapConfig, seed: u64) -> Result<(RssMap, Vec<RssDataset>, Normalizer)> {
    let map = RssMap::new(config.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = config.radius_m;
    let mut points = Vec::with_capacity(config.n_samples);
    while points.len() < config.n_samples {
        let p = [rng.random_range(-r..=r), rng.random_range(-r..=r)];
        if map.measurable(p) {
            points.push(p);
        }
    }
    points.shuffle(&mut rng);
    let rss: Vec<f64> = points.iter().map(|&p| map.rss_dbm(p)).collect();
    let norm = Normalizer {
        radius_m: r,
        rss_min_dbm: rss.iter().copied().fold(f64::INFINITY, f64::min),
        rss_max_dbm: rss.iter().copied().fold(f64::NEG_INFINITY, f64::max),
    };
    let per = config.n_samples / config.n_sensors;
    let datasets = (0..config.n_sensors)
        .map(|k| {
            let hi = if k + 1 == config.n_sensors { config.n_samples } else { (k + 1) * per };
            let records: Vec<RssRecord> = (k * per..hi)
                .map(|i| {
                    let [lat, lon] = norm.position(points[i]);
                    RssRecord { lat_norm: lat, lon_norm: lon, rss_norm: norm.rss(rss[i]) }
                })
                .collect();
            RssDataset { owner: k, epsilon: records.len() as f64 / config.n_samples as f64, records }
        })
        .collect();
    Ok((map, datasets, norm))
}
