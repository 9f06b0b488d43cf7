//! Run configuration.
//!
//! Configs are TOML with dotted block prefixes:
//!
//! ```toml
//! experiment = "characterize"
//! seed = 7
//! n_gates = 100_000_000
//! gate.frequency = 2e9
//! gate.dc_bias = 41.0
//! detector.eta_max = 0.3
//! ```
//!
//! Every key is optional except `experiment` and `seed`. Unknown keys are
//! rejected. A JSON file is accepted too, either a bare config or a
//! `manifest.json` from an earlier run, which is replayed as is.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::apdsim::{default_jitter_fwhm, DetectorParams, PhotonSource};
use crate::error::{Error, Result};
use crate::protocol::{ClampPolicy, OperatingPoint};
use crate::sdcore::SdConfig;
use crate::signal::{GateConfig, PulseShape, DEFAULT_COUPLING_FARADS, DEFAULT_SAMPLE_RATE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    WaveformDemo,
    SdCancel,
    DelayScan,
    Characterize,
    BiasSweep,
    AfterpulseCharge,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::WaveformDemo,
        Experiment::SdCancel,
        Experiment::DelayScan,
        Experiment::Characterize,
        Experiment::BiasSweep,
        Experiment::AfterpulseCharge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::WaveformDemo => "waveform-demo",
            Experiment::SdCancel => "sd-cancel",
            Experiment::DelayScan => "delay-scan",
            Experiment::Characterize => "characterize",
            Experiment::BiasSweep => "bias-sweep",
            Experiment::AfterpulseCharge => "afterpulse-charge",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::UnknownExperiment(s.to_string()))
    }
}

/// Waveform experiments: trace length, sampling and the injected avalanche.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaveformSettings {
    /// Trace length in gate periods.
    pub periods: u32,
    pub sample_rate: f64,
    pub coupling: f64,
    pub noise_rms: f64,
    /// Pick the whole number of gate periods nearest the line length and
    /// trim the stretcher to match it exactly. Off uses `sd` as given.
    pub tune: bool,
    pub avalanche_charge: f64,
    /// Avalanche time measured in gate periods from the trace start.
    pub avalanche_period: f64,
}

impl Default for WaveformSettings {
    fn default() -> Self {
        Self {
            periods: 16,
            sample_rate: DEFAULT_SAMPLE_RATE,
            coupling: DEFAULT_COUPLING_FARADS,
            noise_rms: 0.0,
            tune: true,
            avalanche_charge: 0.035e-12,
            avalanche_period: 8.25,
        }
    }
}

/// Bias points for sweeps: an explicit list, or `points` evenly spaced
/// values from `start` to `stop` inclusive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSettings {
    pub biases: Vec<f64>,
    pub start: f64,
    pub stop: f64,
    pub points: u32,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            biases: Vec::new(),
            start: 40.7,
            stop: 43.0,
            points: 24,
        }
    }
}

impl SweepSettings {
    pub fn grid(&self) -> Vec<f64> {
        if !self.biases.is_empty() {
            return self.biases.clone();
        }
        linear_grid(self.start, self.stop, self.points as usize)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanSettings {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl Default for ScanSettings {
    fn default() -> Self {
        Self {
            start: 0.0,
            stop: 3e-9,
            step: 10e-12,
        }
    }
}

impl ScanSettings {
    pub fn grid(&self) -> Vec<f64> {
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        (0..n).map(|i| self.start + i as f64 * self.step).collect()
    }
}

fn linear_grid(start: f64, stop: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|i| start + (stop - start) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub experiment: Option<Experiment>,
    pub seed: Option<u64>,
    /// Gates per simulated run; per point for scans and sweeps.
    pub n_gates: u64,
    pub clamp: ClampPolicy,
    /// Write the per-gate event log of the illuminated run (characterize).
    pub events: bool,
    pub gate: GateConfig,
    pub detector: DetectorParams,
    pub source: PhotonSource,
    pub sd: SdConfig,
    pub pulse: PulseShape,
    /// When set, detector parameters are adjusted so the model reproduces
    /// this operating point at `gate.dc_bias`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plant: Option<OperatingPoint>,
    pub waveform: WaveformSettings,
    pub sweep: SweepSettings,
    pub scan: ScanSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            experiment: None,
            seed: None,
            n_gates: 10_000_000,
            clamp: ClampPolicy::Total,
            events: false,
            gate: GateConfig::default(),
            detector: DetectorParams::default(),
            source: PhotonSource::default(),
            sd: SdConfig::default(),
            pulse: PulseShape::default(),
            plant: None,
            waveform: WaveformSettings::default(),
            sweep: SweepSettings::default(),
            scan: ScanSettings::default(),
        }
    }
}

impl RunConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        if path.extension().is_some_and(|e| e == "json") {
            Self::from_json_str(&text)
        } else {
            Self::from_toml_str(&text)
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        let raw = serde_json::to_value(&table).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_value(raw)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let mut raw: Value =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(inner) = raw.get_mut("config") {
            raw = inner.take();
        }
        Self::from_value(raw)
    }

    fn from_value(raw: Value) -> Result<Self> {
        if let Some(Value::String(name)) = raw.get("experiment") {
            name.parse::<Experiment>()?;
        }
        let mut cfg: RunConfig =
            serde_json::from_value(raw.clone()).map_err(|e| Error::Config(e.to_string()))?;
        let resolved = serde_json::to_value(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        check_known_keys(&raw, &resolved, "")?;
        if raw.pointer("/detector/jitter_fwhm").is_none() {
            cfg.detector.jitter_fwhm = default_jitter_fwhm(cfg.gate.frequency);
        }
        Ok(cfg)
    }

    pub fn experiment(&self) -> Result<Experiment> {
        self.experiment
            .ok_or_else(|| Error::Config("no experiment given".into()))
    }

    pub fn seed(&self) -> Result<u64> {
        self.seed
            .ok_or_else(|| Error::Config("a seed is required".into()))
    }

    /// Checks everything the selected experiment will use.
    pub fn validate(&self) -> Result<()> {
        let experiment = self.experiment()?;
        self.seed()?;
        self.gate.validate()?;
        match experiment {
            Experiment::WaveformDemo | Experiment::SdCancel => {
                self.sd.validate()?;
                self.pulse.validate()?;
                let w = &self.waveform;
                if w.periods < 2 {
                    return Err(Error::param("waveform.periods", "need at least 2"));
                }
                if !(w.coupling > 0.0) {
                    return Err(Error::param("waveform.coupling", "must be positive"));
                }
                if !(w.noise_rms >= 0.0) {
                    return Err(Error::param("waveform.noise_rms", "must be non-negative"));
                }
            }
            _ => {
                self.detector.validate()?;
                self.source.validate()?;
                self.source.sync_divisor(self.gate.frequency)?;
                if self.n_gates == 0 {
                    return Err(Error::param("n_gates", "must be positive"));
                }
                if let Some(p) = &self.plant {
                    if (p.gate_frequency - self.gate.frequency).abs() > 1e-9 * self.gate.frequency {
                        return Err(Error::param(
                            "plant.gate_frequency",
                            "must equal gate.frequency",
                        ));
                    }
                }
            }
        }
        match experiment {
            Experiment::BiasSweep | Experiment::AfterpulseCharge => {
                if self.sweep.grid().len() < 5 {
                    return Err(Error::param("sweep", "a sweep needs at least 5 points"));
                }
            }
            Experiment::DelayScan => {
                let s = &self.scan;
                if !(s.step > 0.0) || !(s.stop > s.start) {
                    return Err(Error::param("scan", "need step > 0 and stop > start"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Every key present in `raw` must survive a round trip through the typed
/// config; anything else is a typo or an unsupported option.
fn check_known_keys(raw: &Value, resolved: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(r), Value::Object(k)) = (raw, resolved) {
        for (key, value) in r {
            let path = if prefix.is_empty() {
                key.clone()
            } else {
                format!("{prefix}.{key}")
            };
            match k.get(key) {
                Some(known) => check_known_keys(value, known, &path)?,
                None if value.is_null() => {}
                None => return Err(Error::Config(format!("unknown key `{path}`"))),
            }
        }
    }
    Ok(())
}
