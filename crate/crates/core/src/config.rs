//! Run configuration shared by every pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calibrate::CalibrationOptions;
use crate::detector::{Thresholds, WaveformParams};
use crate::error::{Error, Result};
use crate::nist::TrialPlan;
use crate::provenance::{sha256_hex, Provenance};
use crate::qrng::MAX_BITS_PER_EVENT;
use crate::source::{split_coherent, ChannelLabel, ChannelModel, SplitterNetwork, DEFAULT_EFFICIENCIES};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SourceConfig {
    /// Mean photon number before splitting and loss.
    pub nbar: f64,
    /// Intensity reflectance of the first beamsplitter.
    pub r1_sq: f64,
    /// Intensity reflectance of the second beamsplitter.
    pub r2_sq: f64,
    /// Detection efficiencies of channels a, b, c.
    pub efficiencies: [f64; 3],
    pub phase_jitter: bool,
}

impl Default for SourceConfig {
    fn default() -> Self {
        Self {
            nbar: 57.0,
            r1_sq: 1.0 / 3.0,
            r2_sq: 0.5,
            efficiencies: DEFAULT_EFFICIENCIES,
            phase_jitter: false,
        }
    }
}

impl SourceConfig {
    pub fn channels(&self) -> Result<[ChannelModel; 3]> {
        let net = SplitterNetwork::from_reflectances(self.r1_sq, self.r2_sq)?;
        split_coherent(self.nbar, &net, self.efficiencies)
    }
}

/// Pulse model of each channel.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectorConfig {
    pub a: WaveformParams,
    pub b: WaveformParams,
    pub c: WaveformParams,
}

impl DetectorConfig {
    pub fn channel(&self, ch: ChannelLabel) -> &WaveformParams {
        match ch {
            ChannelLabel::A => &self.a,
            ChannelLabel::B => &self.b,
            ChannelLabel::C => &self.c,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QrngConfig {
    /// Bits per event.
    pub d: u32,
}

impl Default for QrngConfig {
    fn default() -> Self {
        Self { d: 3 }
    }
}

/// Output directory and optional external inputs. Paths here never affect
/// results and are left out of the configuration hash.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    pub out_dir: PathBuf,
    /// Waveform file to extract instead of simulating pulses.
    pub waveforms: Option<PathBuf>,
    /// Feature CSV to calibrate and count instead of the extracted one.
    pub features: Option<PathBuf>,
    /// Calibration file to count with instead of the fitted one.
    pub calibration: Option<PathBuf>,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("run"),
            waveforms: None,
            features: None,
            calibration: None,
        }
    }
}

/// Environment variables that override I/O paths.
pub const ENV_OUT_DIR: &str = "PNR_OUT_DIR";
pub const ENV_WAVEFORMS: &str = "PNR_WAVEFORMS";
pub const ENV_FEATURES: &str = "PNR_FEATURES";
pub const ENV_CALIBRATION: &str = "PNR_CALIBRATION";

impl IoConfig {
    pub fn apply_env(&mut self) {
        let var = |k: &str| std::env::var_os(k).filter(|v| !v.is_empty()).map(PathBuf::from);
        if let Some(p) = var(ENV_OUT_DIR) {
            self.out_dir = p;
        }
        if let Some(p) = var(ENV_WAVEFORMS) {
            self.waveforms = Some(p);
        }
        if let Some(p) = var(ENV_FEATURES) {
            self.features = Some(p);
        }
        if let Some(p) = var(ENV_CALIBRATION) {
            self.calibration = Some(p);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Required whenever events or pulses are simulated.
    pub seed: Option<u64>,
    pub events: u64,
    pub source: SourceConfig,
    pub detector: DetectorConfig,
    pub daq: Thresholds,
    pub calibration: CalibrationOptions,
    pub qrng: QrngConfig,
    pub nist: TrialPlan,
    pub io: IoConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: None,
            events: 100_000,
            source: SourceConfig::default(),
            detector: DetectorConfig::default(),
            daq: Thresholds::default(),
            calibration: CalibrationOptions::default(),
            qrng: QrngConfig::default(),
            nist: TrialPlan::default(),
            io: IoConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            e => e,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.source.nbar >= 0.0 && self.source.nbar.is_finite()) {
            return Err(Error::config(format!("source.nbar must be finite and ≥ 0, got {}", self.source.nbar)));
        }
        self.source.channels().map_err(|e| Error::config(format!("source: {e}")))?;
        if self.events == 0 {
            return Err(Error::config("events must be at least 1"));
        }
        for ch in ChannelLabel::ALL {
            self.detector
                .channel(ch)
                .validate()
                .map_err(|e| Error::config(format!("detector.{}: {e}", ch.as_str())))?;
        }
        self.daq.validate()?;
        self.calibration.validate()?;
        if !(1..=MAX_BITS_PER_EVENT).contains(&self.qrng.d) {
            return Err(Error::config(format!("qrng.d must be in 1..={MAX_BITS_PER_EVENT}, got {}", self.qrng.d)));
        }
        self.nist.validate()?;
        Ok(())
    }

    /// Seed for simulation stages.
    pub fn require_seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::config("a seed is required to simulate; set `seed` in the config or pass --seed"))
    }

    /// SHA-256 of the configuration without its I/O paths.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.io = IoConfig::default();
        Ok(sha256_hex(c.to_toml()?.as_bytes()))
    }

    pub fn provenance(&self) -> Result<Provenance> {
        Ok(Provenance::new(self.hash()?, self.seed))
    }
}
