use std::fmt;
use std::path::Path;
use std::str::FromStr;

use airfed_core::channel::{ImpairmentConfig, PhyConfig};
use airfed_core::fl::{RssMapConfig, TrainConfig};
use airfed_core::protocol::ProtocolConfig;
use serde::{Deserialize, Serialize};

use crate::HarnessError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    FrameTiming,
    Cfo,
    Constellation,
    Apb,
    Train,
    E2e,
}

impl Scenario {
    pub const ALL: [Scenario; 6] =
        [Scenario::FrameTiming, Scenario::Cfo, Scenario::Constellation, Scenario::Apb, Scenario::Train, Scenario::E2e];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::FrameTiming => "frame-timing",
            Scenario::Cfo => "cfo",
            Scenario::Constellation => "constellation",
            Scenario::Apb => "apb",
            Scenario::Train => "train",
            Scenario::E2e => "e2e",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Scenario::ALL.into_iter().find(|sc| sc.name() == s).ok_or_else(|| format!("unknown scenario `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrameTimingConfig {
    /// FT lengths swept alongside SNR.
    pub m_ft: Vec<usize>,
    /// Detection searches this many candidate starts; the frame lands uniformly among them.
    pub search_window: usize,
}

impl Default for FrameTimingConfig {
    fn default() -> Self {
        Self { m_ft: vec![64, 128, 256], search_window: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CfoConfig {
    pub tracking_snr_db: f64,
    pub tracking_trials: usize,
    /// Number of tracked pilots `p`.
    pub tracking_pilots: usize,
    /// Residual CFO range left by the coarse stage; the tracked residual is drawn uniformly from it.
    pub residual_max_hz: f64,
    /// Samples between tracked pilots.
    pub interval_samples: usize,
}

impl Default for CfoConfig {
    fn default() -> Self {
        Self {
            tracking_snr_db: 0.0,
            tracking_trials: 1000,
            tracking_pilots: 16,
            residual_max_hz: 5.0,
            interval_samples: 15_360,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstellationConfig {
    pub qam_order: usize,
    pub data_symbols: usize,
}

impl Default for ConstellationConfig {
    fn default() -> Self {
        Self { qam_order: 16, data_symbols: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApbConfig {
    /// OTA rounds per session; `trials` sessions are run.
    pub rounds: usize,
}

impl Default for ApbConfig {
    fn default() -> Self {
        Self { rounds: 20 }
    }
}

/// A complete experiment description. Every section has defaults, so a file
/// only needs the keys it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    /// SNR grid in dB, swept by the frame-timing, cfo, constellation and apb scenarios.
    pub snr_db: Vec<f64>,
    pub phy: PhyConfig,
    pub channel: ImpairmentConfig,
    pub protocol: ProtocolConfig,
    pub train: TrainConfig,
    pub map: RssMapConfig,
    pub frame_timing: FrameTimingConfig,
    pub cfo: CfoConfig,
    pub constellation: ConstellationConfig,
    pub apb: ApbConfig,
    pub heatmap_step_m: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            trials: 10,
            snr_db: vec![20.0],
            phy: PhyConfig::default(),
            channel: ImpairmentConfig::default(),
            protocol: ProtocolConfig::default(),
            train: TrainConfig::default(),
            map: RssMapConfig::default(),
            frame_timing: FrameTimingConfig::default(),
            cfo: CfoConfig::default(),
            constellation: ConstellationConfig::default(),
            apb: ApbConfig::default(),
            heatmap_step_m: 5.0,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub snr_db: Option<Vec<f64>>,
    pub trials: Option<usize>,
    pub no_compensation: bool,
}

impl ExperimentConfig {
    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(snr) = &o.snr_db {
            self.snr_db = snr.clone();
        }
        if let Some(t) = o.trials {
            self.trials = t;
        }
        if o.no_compensation {
            self.protocol.compensation = false;
        }
    }

    pub fn validate(&self, scenario: Scenario) -> Result<(), HarnessError> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.trials == 0 {
            return bad("trials must be at least 1".into());
        }
        if self.snr_db.is_empty() || self.snr_db.iter().any(|s| !s.is_finite()) {
            return bad("snr_db must be a nonempty list of finite values".into());
        }
        self.phy.validate()?;
        self.channel.validate(&self.phy)?;
        self.map.validate()?;
        self.train.validate()?;
        match scenario {
            Scenario::FrameTiming => {
                if self.frame_timing.m_ft.is_empty() || self.frame_timing.search_window == 0 {
                    return bad("frame_timing needs a nonempty m_ft grid and a positive search window".into());
                }
                for &m in &self.frame_timing.m_ft {
                    PhyConfig { m_ft: m, ..self.phy.clone() }.validate()?;
                }
            }
            Scenario::Cfo => {
                let c = &self.cfo;
                if c.tracking_trials == 0 || c.tracking_pilots == 0 || c.interval_samples == 0 {
                    return bad("cfo tracking needs positive trials, pilots and interval".into());
                }
                let limit = 0.5 * self.phy.fs_hz / c.interval_samples as f64;
                if !(c.residual_max_hz >= 0.0 && c.residual_max_hz < limit) {
                    return bad(format!("residual_max_hz must lie in [0, {limit}) for the tracking interval"));
                }
            }
            Scenario::Constellation => {
                if !matches!(self.constellation.qam_order, 4 | 16) || self.constellation.data_symbols == 0 {
                    return bad("constellation supports 4- or 16-QAM and at least one data symbol".into());
                }
            }
            Scenario::Apb => {
                if self.apb.rounds == 0 {
                    return bad("apb.rounds must be at least 1".into());
                }
                self.protocol.validate(&self.phy, 2)?;
            }
            Scenario::Train | Scenario::E2e => {
                if self.snr_db.len() != 1 {
                    return bad(format!("{scenario} takes a single SNR, got {}", self.snr_db.len()));
                }
                if !(self.heatmap_step_m > 0.0) {
                    return bad("heatmap_step_m must be positive".into());
                }
                self.protocol.validate(&self.phy, self.map.n_sensors)?;
            }
        }
        Ok(())
    }
}

/// Reads an experiment file or a run manifest. A manifest carries its own
/// scenario, which must match the requested one.
pub fn load_config(path: &Path, scenario: Scenario) -> Result<ExperimentConfig, HarnessError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| HarnessError::Config(format!("cannot read {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    let is_manifest = value.get("outputs").is_some() && value.get("config").is_some();
    let cfg_value = if is_manifest {
        let recorded = value.get("scenario").and_then(|s| s.as_str()).unwrap_or_default();
        if recorded != scenario.name() {
            return Err(HarnessError::Config(format!("manifest is for `{recorded}`, not `{scenario}`")));
        }
        value["config"].clone()
    } else {
        value
    };
    serde_json::from_value(cfg_value).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))
}
