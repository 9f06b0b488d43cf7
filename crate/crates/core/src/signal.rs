//! Sampled voltage waveforms: band-limited gate trains, capacitive
//! feed-through, avalanche pulses and additive noise.

use std::f64::consts::PI;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, CounterRng};

/// Default simulation sample rate, 64 GS/s.
pub const DEFAULT_SAMPLE_RATE: f64 = 64e9;

/// Transimpedance used to express a displacement current as a voltage.
pub const TRANSIMPEDANCE_OHMS: f64 = 50.0;

/// Default APD junction coupling capacitance for the feed-through model.
// Calibration knob; the device capacitance is not a published value.
pub const DEFAULT_COUPLING_FARADS: f64 = 0.5e-12;

/// Uniformly sampled voltage trace.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    sample_rate: f64,
    start_time: f64,
    samples: Vec<f64>,
}

impl Waveform {
    pub fn new(sample_rate: f64, start_time: f64, samples: Vec<f64>) -> Result<Self> {
        if !(sample_rate > 0.0) || !sample_rate.is_finite() {
            return Err(Error::param("sample_rate", "must be positive and finite"));
        }
        if samples.is_empty() {
            return Err(Error::TooShort("waveform has no samples".into()));
        }
        Ok(Self {
            sample_rate,
            start_time,
            samples,
        })
    }

    pub fn sample_rate(&self) -> f64 {
        self.sample_rate
    }

    pub fn start_time(&self) -> f64 {
        self.start_time
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.sample_rate
    }

    pub fn time(&self, index: usize) -> f64 {
        self.start_time + index as f64 / self.sample_rate
    }

    /// Time of the last sample.
    pub fn end_time(&self) -> f64 {
        self.time(self.samples.len() - 1)
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate
    }

    pub fn with_samples(&self, samples: Vec<f64>) -> Self {
        Self {
            sample_rate: self.sample_rate,
            start_time: self.start_time,
            samples,
        }
    }

    pub fn rms(&self) -> f64 {
        let ss: f64 = self.samples.iter().map(|v| v * v).sum();
        (ss / self.samples.len() as f64).sqrt()
    }

    pub fn peak_to_peak(&self) -> f64 {
        let (lo, hi) = self
            .samples
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            });
        hi - lo
    }

    /// Complex amplitude of the component at `freq` by discrete Fourier
    /// projection, phase referenced to t = 0. Exact for an integer number
    /// of periods.
    pub fn project(&self, freq: f64) -> (f64, f64) {
        let w = 2.0 * PI * freq;
        let (mut re, mut im) = (0.0, 0.0);
        for (i, &v) in self.samples.iter().enumerate() {
            let ph = w * self.time(i);
            re += v * ph.cos();
            im -= v * ph.sin();
        }
        let scale = 2.0 / self.samples.len() as f64;
        (re * scale, im * scale)
    }

    /// Magnitude of [`Waveform::project`].
    pub fn amplitude_at(&self, freq: f64) -> f64 {
        let (re, im) = self.project(freq);
        re.hypot(im)
    }

    /// Checks that `other` can be combined samplewise with `self`.
    pub fn check_compatible(&self, other: &Waveform) -> Result<()> {
        if self.sample_rate != other.sample_rate {
            return Err(Error::Incompatible(format!(
                "sample rates differ: {} vs {}",
                self.sample_rate, other.sample_rate
            )));
        }
        if (self.start_time - other.start_time).abs() > self.dt() {
            return Err(Error::Incompatible(format!(
                "time grids differ by more than one sample: {:e} vs {:e}",
                self.start_time, other.start_time
            )));
        }
        Ok(())
    }

    /// Samplewise `a * self + b * other` over the common length.
    pub fn combine(&self, a: f64, other: &Waveform, b: f64) -> Result<Waveform> {
        self.check_compatible(other)?;
        let samples = self
            .samples
            .iter()
            .zip(&other.samples)
            .map(|(x, y)| a * x + b * y)
            .collect();
        Waveform::new(self.sample_rate, self.start_time, samples)
    }

    pub fn scaled(&self, a: f64) -> Waveform {
        self.with_samples(self.samples.iter().map(|v| a * v).collect())
    }

    /// Samples whose time falls in `[t0, t0 + n/fs)`, rounded to the grid.
    pub fn window(&self, t0: f64, n: usize) -> Result<Waveform> {
        let first = ((t0 - self.start_time) * self.sample_rate).round();
        if first < 0.0 || first as usize + n > self.samples.len() || n == 0 {
            return Err(Error::TooShort(format!(
                "window of {n} samples at {t0:e} s exceeds the waveform"
            )));
        }
        let first = first as usize;
        Waveform::new(
            self.sample_rate,
            self.time(first),
            self.samples[first..first + n].to_vec(),
        )
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "t_s,v_volts")?;
        for (i, v) in self.samples.iter().enumerate() {
            writeln!(out, "{:?},{:?}", self.time(i), v)?;
        }
        out.flush()
    }

    /// Parses the `t_s,v_volts` format; the sample rate is recovered from
    /// the first two time stamps.
    pub fn read_csv<R: BufRead>(input: R) -> Result<Waveform> {
        let bad = |m: &str| Error::Config(format!("waveform csv: {m}"));
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| bad("empty"))?
            .map_err(|e| bad(&e.to_string()))?;
        if header.trim() != "t_s,v_volts" {
            return Err(bad("unexpected header"));
        }
        let mut times = Vec::new();
        let mut samples = Vec::new();
        for line in lines {
            let line = line.map_err(|e| bad(&e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let (t, v) = line.split_once(',').ok_or_else(|| bad("missing column"))?;
            times.push(t.trim().parse::<f64>().map_err(|e| bad(&e.to_string()))?);
            samples.push(v.trim().parse::<f64>().map_err(|e| bad(&e.to_string()))?);
        }
        if times.len() < 2 {
            return Err(bad("need at least two rows"));
        }
        let rate = (times.len() - 1) as f64 / (times[times.len() - 1] - times[0]);
        Waveform::new(rate, times[0], samples)
    }
}

/// Gate drive settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GateConfig {
    /// Gating frequency in Hz.
    pub frequency: f64,
    /// Peak-to-peak square-wave amplitude in volts.
    pub amplitude: f64,
    /// DC bias in volts.
    pub dc_bias: f64,
    /// Highest harmonic frequency passed by the drive chain, Hz.
    pub analog_bandwidth: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            frequency: 2e9,
            amplitude: 7.1,
            dc_bias: 41.0,
            analog_bandwidth: 5e9,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency > 0.0) || !self.frequency.is_finite() {
            return Err(Error::param("gate.frequency", "must be positive"));
        }
        if !(self.amplitude >= 0.0) {
            return Err(Error::param("gate.amplitude", "must be non-negative"));
        }
        if !self.dc_bias.is_finite() {
            return Err(Error::param("gate.dc_bias", "must be finite"));
        }
        if !(self.analog_bandwidth >= self.frequency * (1.0 - 1e-12)) {
            return Err(Error::param(
                "gate.analog_bandwidth",
                "must pass at least the fundamental",
            ));
        }
        Ok(())
    }

    pub fn period(&self) -> f64 {
        1.0 / self.frequency
    }

    /// Odd harmonic orders passed by the analog bandwidth.
    pub fn harmonics(&self) -> impl Iterator<Item = u32> + '_ {
        let limit = self.analog_bandwidth * (1.0 + 1e-9);
        (1u32..)
            .step_by(2)
            .take_while(move |&k| k as f64 * self.frequency <= limit)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PulseKind {
    RaisedCosine,
    SingleSidedExponential,
}

/// Avalanche pulse template. The profile has unit peak; `width` is the
/// full base width for the raised cosine and the decay constant for the
/// exponential.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PulseShape {
    pub kind: PulseKind,
    pub width: f64,
    /// Peak volts per coulomb of avalanche charge.
    pub amplitude_per_charge: f64,
}

impl Default for PulseShape {
    fn default() -> Self {
        Self {
            kind: PulseKind::RaisedCosine,
            width: 150e-12,
            // 0.035 pC peaks at 0.35 V after amplification.
            amplitude_per_charge: 1e13,
        }
    }
}

impl PulseShape {
    pub fn validate(&self) -> Result<()> {
        if !(self.width > 0.0) {
            return Err(Error::param("pulse.width", "must be positive"));
        }
        if !(self.amplitude_per_charge > 0.0) {
            return Err(Error::param(
                "pulse.amplitude_per_charge",
                "must be positive",
            ));
        }
        Ok(())
    }

    /// Integral of the unit-peak profile, seconds.
    pub fn unit_area(&self) -> f64 {
        match self.kind {
            PulseKind::RaisedCosine => 0.5 * self.width,
            PulseKind::SingleSidedExponential => self.width,
        }
    }

    /// Unit-peak profile at offset `s` from the pulse reference time.
    pub fn profile(&self, s: f64) -> f64 {
        match self.kind {
            PulseKind::RaisedCosine => {
                if s.abs() > 0.5 * self.width {
                    0.0
                } else {
                    0.5 * (1.0 + (2.0 * PI * s / self.width).cos())
                }
            }
            PulseKind::SingleSidedExponential => {
                if s < 0.0 {
                    0.0
                } else {
                    (-s / self.width).exp()
                }
            }
        }
    }

    /// Antiderivative of the profile from its leading edge up to `s`.
    fn cumulative(&self, s: f64) -> f64 {
        let w = self.width;
        match self.kind {
            PulseKind::RaisedCosine => {
                let s = s.clamp(-0.5 * w, 0.5 * w);
                0.5 * (s + 0.5 * w) + w / (4.0 * PI) * (2.0 * PI * s / w).sin()
            }
            PulseKind::SingleSidedExponential => {
                if s <= 0.0 {
                    0.0
                } else {
                    w * (-(-s / w).exp_m1())
                }
            }
        }
    }

    /// Support of the profile relative to the reference time.
    fn support(&self) -> (f64, f64) {
        match self.kind {
            PulseKind::RaisedCosine => (-0.5 * self.width, 0.5 * self.width),
            // exp(-60) is below double precision relative to the peak.
            PulseKind::SingleSidedExponential => (0.0, 60.0 * self.width),
        }
    }

    /// Charge represented by a waveform area (volt-seconds).
    pub fn charge_from_area(&self, area: f64) -> f64 {
        area / (self.amplitude_per_charge * self.unit_area())
    }
}

/// Band-limited square gate train: `dc_bias` plus odd harmonics of a
/// square wave with peak-to-peak `amplitude`, up to the analog bandwidth.
pub fn synth_gate_train(cfg: &GateConfig, duration: f64, sample_rate: f64) -> Result<Waveform> {
    cfg.validate()?;
    if !(duration > 0.0) {
        return Err(Error::param("duration", "must be positive"));
    }
    if duration < 2.0 / cfg.frequency * (1.0 - 1e-9) {
        return Err(Error::TooShort(format!(
            "duration {duration:e} s is shorter than two gate periods"
        )));
    }
    if !(sample_rate >= 8.0 * cfg.analog_bandwidth) {
        return Err(Error::Sampling(format!(
            "sample rate {sample_rate:e} S/s is below 8x the analog bandwidth {:e} Hz",
            cfg.analog_bandwidth
        )));
    }
    let n = (duration * sample_rate).round() as usize;
    let harmonics: Vec<(f64, f64)> = cfg
        .harmonics()
        .map(|k| {
            let k = k as f64;
            (2.0 * PI * k * cfg.frequency, 2.0 * cfg.amplitude / (PI * k))
        })
        .collect();
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sample_rate;
            cfg.dc_bias
                + harmonics
                    .iter()
                    .map(|&(w, a)| a * (w * t).sin())
                    .sum::<f64>()
        })
        .collect();
    Waveform::new(sample_rate, 0.0, samples)
}

/// Displacement current `coupling * dV/dt` through the APD capacitance,
/// expressed in volts across [`TRANSIMPEDANCE_OHMS`].
pub fn capacitive_feedthrough(gate: &Waveform, coupling: f64) -> Result<Waveform> {
    if !(coupling > 0.0) {
        return Err(Error::param("coupling", "must be positive"));
    }
    let x = gate.samples();
    let n = x.len();
    if n < 3 {
        return Err(Error::TooShort(
            "derivative needs at least 3 samples".into(),
        ));
    }
    let k = coupling * TRANSIMPEDANCE_OHMS * gate.sample_rate();
    let mut out = Vec::with_capacity(n);
    out.push(k * (x[1] - x[0]));
    out.extend(x.windows(3).map(|w| 0.5 * k * (w[2] - w[0])));
    out.push(k * (x[n - 1] - x[n - 2]));
    Ok(gate.with_samples(out))
}

/// Adds one avalanche pulse at `time` carrying `charge`. Each sample holds
/// the pulse averaged over its own sampling interval, so the waveform area
/// equals the pulse area exactly when the pulse lies inside the record.
pub fn inject_avalanche(
    base: &Waveform,
    time: f64,
    charge: f64,
    shape: &PulseShape,
) -> Result<Waveform> {
    shape.validate()?;
    let dt = base.dt();
    if !(time >= base.start_time() - 0.5 * dt && time <= base.end_time() + 0.5 * dt) {
        return Err(Error::OutOfRange {
            what: "avalanche time",
            low: base.start_time(),
            high: base.end_time(),
        });
    }
    let mut out = base.samples().to_vec();
    if charge == 0.0 {
        return Ok(base.with_samples(out));
    }
    let scale = charge * shape.amplitude_per_charge / dt;
    let (lo, hi) = shape.support();
    let fs = base.sample_rate();
    let first = (((time + lo - base.start_time()) * fs).floor() as i64 - 1).max(0) as usize;
    let last = (((time + hi - base.start_time()) * fs).ceil() as i64 + 1)
        .clamp(0, out.len() as i64 - 1) as usize;
    for (i, v) in out.iter_mut().enumerate().take(last + 1).skip(first) {
        let t = base.time(i) - time;
        let area = shape.cumulative(t + 0.5 * dt) - shape.cumulative(t - 0.5 * dt);
        *v += scale * area;
    }
    Ok(base.with_samples(out))
}

/// Adds zero-mean Gaussian noise of the given RMS from a seeded
/// counter-based generator (sample index is the counter).
pub fn add_noise(base: &Waveform, rms: f64, seed: u64) -> Result<Waveform> {
    if !(rms >= 0.0) {
        return Err(Error::param("rms", "must be non-negative"));
    }
    if rms == 0.0 {
        return Ok(base.clone());
    }
    let rng = CounterRng::new(seed);
    let samples = base
        .samples()
        .iter()
        .enumerate()
        .map(|(i, v)| v + rms * rng.normal(i as u64, stream::NOISE_A, stream::NOISE_B))
        .collect();
    Ok(base.with_samples(samples))
}
