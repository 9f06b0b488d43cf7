//! Gate-level stochastic model of a gated APD.
//!
//! Each gate may hold at most one avalanche. In order of precedence an
//! avalanche is caused by an absorbed photon, a dark carrier, or a carrier
//! released from the trap reservoir. Every avalanche carries a random
//! charge; only those above the discriminator threshold register as
//! counts, but all of them contribute photocurrent and fill traps.
//!
//! The simulation runs in two passes. Photon and dark avalanches do not
//! depend on trap state and are drawn in parallel over fixed-size blocks.
//! Afterpulses are then resolved sequentially, skipping stretches where
//! the reservoir is empty. All draws come from a counter-based generator
//! keyed by gate index, so outputs do not depend on threading.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{stream, CounterRng};
use crate::signal::GateConfig;
use crate::stats::{normal_cdf, normal_pdf};

/// Discriminator latch: one registered outcome per gate.
pub const MAX_COUNTS_PER_GATE: u32 = 1;

/// Reservoir occupancy below which afterpulsing is treated as impossible.
const RESERVOIR_FLOOR: f64 = 1e-13;

/// Gates per parallel block in the primary pass.
pub const DEFAULT_BLOCK_GATES: u64 = 1 << 16;

/// Timing jitter FWHM measured at 1, 2 and 3 GHz gating.
pub const JITTER_TABLE: [(f64, f64); 3] = [(1e9, 100e-12), (2e9, 120e-12), (3e9, 380e-12)];

/// Afterpulse probability and charge the default trap coefficient is
/// calibrated against (2 GHz operation).
pub const CALIBRATION_AFTERPULSE: f64 = 0.0143;
pub const CALIBRATION_CHARGE: f64 = 0.035e-12;
pub const CALIBRATION_FREQUENCY: f64 = 2e9;

const FWHM_PER_SIGMA: f64 = 2.354_820_045_030_949_3;

/// Jitter FWHM for a gate frequency, linear between table entries and
/// clamped outside them.
pub fn default_jitter_fwhm(frequency: f64) -> f64 {
    let t = &JITTER_TABLE;
    if frequency <= t[0].0 {
        return t[0].1;
    }
    if let Some(&(_, j)) = t.iter().find(|e| e.0 == frequency) {
        return j;
    }
    for w in t.windows(2) {
        let ((f0, j0), (f1, j1)) = (w[0], w[1]);
        if frequency <= f1 {
            return j0 + (j1 - j0) * (frequency - f0) / (f1 - f0);
        }
    }
    t[t.len() - 1].1
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorParams {
    /// Saturated single-photon efficiency.
    pub eta_max: f64,
    /// Bias of half-saturated efficiency, volts.
    pub v_half: f64,
    /// Logistic width of the efficiency curve, volts.
    pub v_slope: f64,
    /// Dark avalanche probability per gate at `dark_ref_bias`.
    pub dark_prob: f64,
    pub dark_ref_bias: f64,
    /// Dark probability scales as excess bias to this power.
    pub dark_bias_exponent: f64,
    /// Mean avalanche charge per volt of excess bias, C/V.
    pub charge_slope: f64,
    pub v_breakdown: f64,
    /// Relative standard deviation of per-event charge.
    pub charge_dispersion: f64,
    /// Discriminator threshold, coulombs.
    pub detect_threshold_charge: f64,
    /// Trap population per coulomb of avalanche charge.
    pub trap_coeff: f64,
    /// Trap lifetime, seconds.
    pub detrap_tau: f64,
    /// Whether afterpulse avalanches refill the trap reservoir.
    pub afterpulse_cascade: bool,
    pub jitter_fwhm: f64,
    /// FWHM of the in-gate photon sensitivity window.
    pub gate_window_fwhm: f64,
}

impl Default for DetectorParams {
    fn default() -> Self {
        let mut p = Self {
            eta_max: 0.35,
            v_half: 40.8,
            v_slope: 0.3,
            dark_prob: 1e-5,
            dark_ref_bias: 41.0,
            dark_bias_exponent: 3.0,
            charge_slope: 0.05e-12,
            v_breakdown: 40.0,
            charge_dispersion: 0.25,
            detect_threshold_charge: 0.01e-12,
            trap_coeff: 0.0,
            detrap_tau: 5e-9,
            afterpulse_cascade: false,
            jitter_fwhm: default_jitter_fwhm(CALIBRATION_FREQUENCY),
            gate_window_fwhm: 100e-12,
        };
        p.trap_coeff = p.calibrated_trap_coeff(
            CALIBRATION_CHARGE,
            CALIBRATION_AFTERPULSE,
            CALIBRATION_FREQUENCY,
        );
        p
    }
}

impl DetectorParams {
    /// Defaults with the tabulated jitter for `frequency`.
    pub fn for_gate_frequency(frequency: f64) -> Self {
        Self {
            jitter_fwhm: default_jitter_fwhm(frequency),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, name: &'static str, why: &str| {
            if ok {
                Ok(())
            } else {
                Err(Error::param(name, why))
            }
        };
        check(
            (0.0..1.0).contains(&self.eta_max),
            "detector.eta_max",
            "must lie in [0, 1)",
        )?;
        check(self.v_slope > 0.0, "detector.v_slope", "must be positive")?;
        check(
            (0.0..1.0).contains(&self.dark_prob),
            "detector.dark_prob",
            "must lie in [0, 1)",
        )?;
        check(
            self.dark_bias_exponent >= 0.0,
            "detector.dark_bias_exponent",
            "must be non-negative",
        )?;
        check(
            self.dark_bias_exponent == 0.0 || self.dark_ref_bias > self.v_breakdown,
            "detector.dark_ref_bias",
            "must exceed breakdown when the dark rate scales with bias",
        )?;
        check(
            self.charge_slope >= 0.0,
            "detector.charge_slope",
            "must be non-negative",
        )?;
        check(
            self.charge_dispersion >= 0.0,
            "detector.charge_dispersion",
            "must be non-negative",
        )?;
        check(
            self.detect_threshold_charge > 0.0,
            "detector.detect_threshold_charge",
            "must be positive",
        )?;
        check(
            self.trap_coeff >= 0.0,
            "detector.trap_coeff",
            "must be non-negative",
        )?;
        check(
            self.detrap_tau > 0.0,
            "detector.detrap_tau",
            "must be positive",
        )?;
        check(
            self.jitter_fwhm >= 0.0,
            "detector.jitter_fwhm",
            "must be non-negative",
        )?;
        check(
            self.gate_window_fwhm > 0.0,
            "detector.gate_window_fwhm",
            "must be positive",
        )?;
        Ok(())
    }

    /// Trap coefficient that maps mean charge `charge` to afterpulse
    /// probability `afterpulse` at `frequency`.
    pub fn calibrated_trap_coeff(&self, charge: f64, afterpulse: f64, frequency: f64) -> f64 {
        let factor = truncated_mean_factor(self.charge_dispersion);
        let w = release_weight_sum(self.detrap_tau, frequency, None);
        let linear = if self.afterpulse_cascade {
            afterpulse / (1.0 + afterpulse)
        } else {
            afterpulse
        };
        linear / (charge * factor * w)
    }

    /// Logistic efficiency with the photon on the gate center.
    pub fn efficiency_vs_bias(&self, bias: f64) -> f64 {
        self.eta_max / (1.0 + (-(bias - self.v_half) / self.v_slope).exp())
    }

    /// Efficiency for a photon arriving `arrival_offset` from a gate center.
    pub fn efficiency_at(&self, bias: f64, arrival_offset: f64) -> f64 {
        let s = self.gate_window_fwhm / FWHM_PER_SIGMA;
        self.efficiency_vs_bias(bias) * (-0.5 * (arrival_offset / s).powi(2)).exp()
    }

    /// Efficiency averaged over a Gaussian optical pulse of FWHM
    /// `pulse_fwhm` centred at `arrival_offset`.
    pub fn pulse_efficiency(&self, bias: f64, arrival_offset: f64, pulse_fwhm: f64) -> f64 {
        let sw = self.gate_window_fwhm / FWHM_PER_SIGMA;
        let sp = pulse_fwhm / FWHM_PER_SIGMA;
        let st = (sw * sw + sp * sp).sqrt();
        self.efficiency_vs_bias(bias) * (sw / st) * (-0.5 * (arrival_offset / st).powi(2)).exp()
    }

    /// Mean of the untruncated charge distribution, `charge_slope * excess`.
    pub fn nominal_charge(&self, bias: f64) -> f64 {
        self.charge_slope * (bias - self.v_breakdown).max(0.0)
    }

    /// Mean charge per avalanche, registered or not.
    pub fn mean_avalanche_charge(&self, bias: f64) -> f64 {
        self.nominal_charge(bias) * truncated_mean_factor(self.charge_dispersion)
    }

    /// Probability that an avalanche clears the discriminator.
    pub fn registration_probability(&self, bias: f64) -> f64 {
        let q = self.nominal_charge(bias);
        let thr = self.detect_threshold_charge;
        if q <= 0.0 {
            return 0.0;
        }
        if self.charge_dispersion == 0.0 {
            return if q >= thr { 1.0 } else { 0.0 };
        }
        normal_cdf((q - thr) / (self.charge_dispersion * q))
    }

    /// Mean charge of registered avalanches.
    pub fn mean_registered_charge(&self, bias: f64) -> f64 {
        let q = self.nominal_charge(bias);
        let p = self.registration_probability(bias);
        if p == 0.0 {
            return 0.0;
        }
        if self.charge_dispersion == 0.0 {
            return q;
        }
        let s = self.charge_dispersion * q;
        let a = (self.detect_threshold_charge - q) / s;
        // E[Q | Q >= thr] for Q ~ N(q, s)
        q + s * normal_pdf(a) / p
    }

    pub fn dark_prob_at(&self, bias: f64) -> f64 {
        if self.dark_bias_exponent == 0.0 {
            return self.dark_prob;
        }
        let excess = (bias - self.v_breakdown).max(0.0);
        let reference = self.dark_ref_bias - self.v_breakdown;
        (self.dark_prob * (excess / reference).powf(self.dark_bias_exponent)).min(1.0 - 1e-12)
    }

    pub fn jitter_sigma(&self) -> f64 {
        self.jitter_fwhm / FWHM_PER_SIGMA
    }
}

/// `E[max(0, 1 + cv Z)]` for standard normal `Z`.
pub fn truncated_mean_factor(cv: f64) -> f64 {
    if cv == 0.0 {
        return 1.0;
    }
    let a = 1.0 / cv;
    normal_cdf(a) + cv * normal_pdf(a)
}

/// Sum of per-gate release weights `w_k = (1 - e^{-x}) e^{-(k-1)x}`,
/// `x = 1 / (f tau)`, over the first `gates` gates after the avalanche
/// (all of them when `None`).
pub fn release_weight_sum(detrap_tau: f64, gate_frequency: f64, gates: Option<u64>) -> f64 {
    let x = 1.0 / (gate_frequency * detrap_tau);
    match gates {
        None => 1.0,
        Some(k) => -(-(k as f64) * x).exp_m1(),
    }
}

/// Expected registered afterpulses per registered photon count. Linear in
/// the mean avalanche charge unless trap cascading is enabled.
pub fn expected_afterpulse_per_count(
    params: &DetectorParams,
    bias: f64,
    gate_frequency: f64,
) -> f64 {
    let y = params.trap_coeff
        * params.mean_avalanche_charge(bias)
        * release_weight_sum(params.detrap_tau, gate_frequency, None);
    if params.afterpulse_cascade {
        y / (1.0 - y)
    } else {
        y
    }
}

/// Expected registered counts per gate with the laser off, afterpulses of
/// dark avalanches included.
pub fn expected_dark_count_prob(params: &DetectorParams, bias: f64, gate_frequency: f64) -> f64 {
    params.dark_prob_at(bias)
        * params.registration_probability(bias)
        * (1.0 + expected_afterpulse_per_count(params, bias, gate_frequency))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhotonSource {
    pub wavelength: f64,
    /// Laser repetition rate, Hz; must divide the gate frequency.
    pub pulse_rate: f64,
    pub mean_photons_per_pulse: f64,
    /// Optical pulse FWHM, seconds.
    pub pulse_width: f64,
    /// Pulse arrival relative to gate centers, seconds.
    pub delay: f64,
}

impl Default for PhotonSource {
    /// 1550 nm, 50 ps pulses at 1/64 of 2 GHz carrying 0.032 photons.
    fn default() -> Self {
        Self {
            wavelength: 1550e-9,
            pulse_rate: 2e9 / 64.0,
            mean_photons_per_pulse: 0.032,
            pulse_width: 50e-12,
            delay: 0.0,
        }
    }
}

impl PhotonSource {
    pub fn validate(&self) -> Result<()> {
        if !(self.wavelength > 0.0) {
            return Err(Error::param("source.wavelength", "must be positive"));
        }
        if !(self.pulse_rate > 0.0) {
            return Err(Error::param("source.pulse_rate", "must be positive"));
        }
        if !(0.0..=100.0).contains(&self.mean_photons_per_pulse) {
            return Err(Error::param(
                "source.mean_photons_per_pulse",
                "must lie in [0, 100]",
            ));
        }
        if !(self.pulse_width >= 0.0) {
            return Err(Error::param("source.pulse_width", "must be non-negative"));
        }
        if !self.delay.is_finite() {
            return Err(Error::param("source.delay", "must be finite"));
        }
        Ok(())
    }

    /// Photons per second.
    pub fn photon_flux(&self) -> f64 {
        self.mean_photons_per_pulse * self.pulse_rate
    }

    /// Gates per laser pulse.
    pub fn sync_divisor(&self, gate_frequency: f64) -> Result<u64> {
        let ratio = gate_frequency / self.pulse_rate;
        let n = ratio.round();
        if n < 1.0 || (ratio - n).abs() > 1e-6 * ratio {
            return Err(Error::DivisorMismatch {
                gate_hz: gate_frequency,
                pulse_hz: self.pulse_rate,
            });
        }
        Ok(n as u64)
    }

    /// Gate catching the first pulse, and the pulse offset from its center.
    pub fn gate_alignment(&self, gate_frequency: f64) -> (i64, f64) {
        let period = 1.0 / gate_frequency;
        let shift = (self.delay / period).round();
        (shift as i64, self.delay - shift * period)
    }

    pub fn laser_off(&self) -> Self {
        Self {
            mean_photons_per_pulse: 0.0,
            ..*self
        }
    }
}

/// Net efficiency that the count-rate estimator should recover: registered
/// photon counts per pulse divided by the mean photon number.
pub fn expected_net_efficiency(
    params: &DetectorParams,
    source: &PhotonSource,
    gate: &GateConfig,
) -> f64 {
    let mu = source.mean_photons_per_pulse;
    if mu == 0.0 {
        return 0.0;
    }
    let (_, offset) = source.gate_alignment(gate.frequency);
    let e = params.pulse_efficiency(gate.dc_bias, offset, source.pulse_width);
    params.registration_probability(gate.dc_bias) * (-(-mu * e).exp_m1()) / mu
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cause {
    Photon,
    Dark,
    Afterpulse,
}

impl Cause {
    pub fn as_str(self) -> &'static str {
        match self {
            Cause::Photon => "photon",
            Cause::Dark => "dark",
            Cause::Afterpulse => "afterpulse",
        }
    }
}

/// One avalanche; gates without an avalanche produce no outcome.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateOutcome {
    pub gate_index: u64,
    pub detected: bool,
    pub cause: Cause,
    pub charge: f64,
    pub timestamp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub gates: u64,
    pub gate_frequency: f64,
    pub counts: u64,
    pub photon_counts: u64,
    pub dark_counts: u64,
    pub afterpulse_counts: u64,
    /// All avalanches including those below threshold.
    pub avalanches: u64,
    pub total_charge: f64,
    pub registered_charge: f64,
    /// Total avalanche charge over wall time, amperes.
    pub photocurrent: f64,
    pub wall_time: f64,
    pub sync_divisor: u64,
    /// Registered counts per gate position modulo `sync_divisor`.
    pub histogram: Vec<u64>,
}

impl RunSummary {
    pub fn count_rate(&self) -> f64 {
        self.counts as f64 / self.wall_time
    }

    pub fn mean_registered_charge(&self) -> Option<f64> {
        (self.counts > 0).then(|| self.registered_charge / self.counts as f64)
    }
}

/// Writes `gate_index,detected,cause,charge_C,timestamp_s`.
pub fn write_events_csv<W: std::io::Write>(
    outcomes: &[GateOutcome],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "gate_index,detected,cause,charge_C,timestamp_s")?;
    for o in outcomes {
        writeln!(
            out,
            "{},{},{},{:?},{:?}",
            o.gate_index,
            o.detected,
            o.cause.as_str(),
            o.charge,
            o.timestamp
        )?;
    }
    out.flush()
}

#[derive(Clone, Copy)]
struct Primary {
    gate: u64,
    cause: Cause,
    charge: f64,
}

struct Model {
    rng: CounterRng,
    q_mean: f64,
    dispersion: f64,
    threshold: f64,
    trap_per_charge: f64,
    decay: f64,
    cascade: bool,
    p_dark: f64,
    mu: f64,
    e_photon: f64,
    divisor: u64,
    first_lit: i64,
    period: f64,
    jitter: f64,
}

impl Model {
    #[inline]
    fn charge(&self, gate: u64, a: u64, b: u64) -> f64 {
        if self.dispersion == 0.0 {
            return self.q_mean;
        }
        let z = self.rng.normal(gate, a, b);
        (self.q_mean * (1.0 + self.dispersion * z)).max(0.0)
    }

    #[inline]
    fn photon_fires(&self, g: u64) -> bool {
        let n = self.rng.poisson(g, stream::PHOTON_NUMBER, self.mu);
        if n == 0 {
            return false;
        }
        let p = 1.0 - (1.0 - self.e_photon).powi(n as i32);
        self.rng.uniform(g, stream::PHOTON_FIRE) < p
    }

    fn first_lit_at_or_after(&self, g: u64) -> u64 {
        let s = self.first_lit;
        if (g as i64) <= s {
            return s.max(0) as u64;
        }
        let d = self.divisor as i64;
        let k = (g as i64 - s + d - 1) / d;
        (s + k * d) as u64
    }

    fn primaries(&self, start: u64, end: u64) -> Vec<Primary> {
        let mut out = Vec::new();
        let mut lit = if self.mu > 0.0 && self.e_photon > 0.0 {
            self.first_lit_at_or_after(start)
        } else {
            u64::MAX
        };
        let mut push = |g: u64, cause: Cause| {
            let charge = self.charge(g, stream::CHARGE_A, stream::CHARGE_B);
            out.push(Primary {
                gate: g,
                cause,
                charge,
            });
        };
        if self.p_dark > 0.0 {
            for g in start..end {
                if g == lit {
                    lit += self.divisor;
                    if self.photon_fires(g) {
                        push(g, Cause::Photon);
                        continue;
                    }
                }
                if self.rng.uniform(g, stream::DARK) < self.p_dark {
                    push(g, Cause::Dark);
                }
            }
        } else {
            while lit < end {
                if self.photon_fires(lit) {
                    push(lit, Cause::Photon);
                }
                lit += self.divisor;
            }
        }
        out
    }

    fn outcome(&self, gate: u64, cause: Cause, charge: f64) -> GateOutcome {
        let jitter = if self.jitter > 0.0 {
            self.jitter * self.rng.normal(gate, stream::JITTER_A, stream::JITTER_B)
        } else {
            0.0
        };
        GateOutcome {
            gate_index: gate,
            detected: charge >= self.threshold,
            cause,
            charge,
            timestamp: gate as f64 * self.period + jitter,
        }
    }

    /// Sequential trap pass; returns every avalanche in gate order.
    fn resolve(&self, primaries: &[Primary], n_gates: u64) -> Vec<GateOutcome> {
        let mut out = Vec::with_capacity(primaries.len() + primaries.len() / 8);
        let mut reservoir = 0.0f64;
        let mut next = 0u64;
        let release = 1.0 - self.decay;
        let scan_until = |limit: u64,
                          reservoir: &mut f64,
                          next: &mut u64,
                          out: &mut Vec<GateOutcome>| {
            while *reservoir > RESERVOIR_FLOOR && *next < limit {
                let g = *next;
                let released = *reservoir * release;
                *reservoir -= released;
                if self.rng.uniform(g, stream::AFTERPULSE) < released {
                    let q =
                        self.charge(g, stream::AFTERPULSE_CHARGE_A, stream::AFTERPULSE_CHARGE_B);
                    if self.cascade {
                        *reservoir += self.trap_per_charge * q;
                    }
                    out.push(self.outcome(g, Cause::Afterpulse, q));
                }
                *next += 1;
            }
            if *reservoir <= RESERVOIR_FLOOR {
                *reservoir = 0.0;
                *next = limit;
            }
        };
        for p in primaries {
            scan_until(p.gate, &mut reservoir, &mut next, &mut out);
            // carriers released during an occupied gate are lost
            reservoir *= self.decay;
            reservoir += self.trap_per_charge * p.charge;
            out.push(self.outcome(p.gate, p.cause, p.charge));
            next = p.gate + 1;
        }
        scan_until(n_gates, &mut reservoir, &mut next, &mut out);
        out
    }
}

/// Simulates `n_gates` gates; see the module docs for the per-gate rules.
pub fn simulate_gates(
    params: &DetectorParams,
    source: &PhotonSource,
    gate: &GateConfig,
    n_gates: u64,
    seed: u64,
) -> Result<(Vec<GateOutcome>, RunSummary)> {
    simulate_gates_blocked(params, source, gate, n_gates, seed, DEFAULT_BLOCK_GATES)
}

/// [`simulate_gates`] with an explicit parallel block size. The result
/// does not depend on `block_gates`.
pub fn simulate_gates_blocked(
    params: &DetectorParams,
    source: &PhotonSource,
    gate: &GateConfig,
    n_gates: u64,
    seed: u64,
    block_gates: u64,
) -> Result<(Vec<GateOutcome>, RunSummary)> {
    params.validate()?;
    source.validate()?;
    gate.validate()?;
    if n_gates == 0 {
        return Err(Error::param("n_gates", "must be at least 1"));
    }
    if block_gates == 0 {
        return Err(Error::param("block_gates", "must be at least 1"));
    }
    let divisor = source.sync_divisor(gate.frequency)?;
    let bias = gate.dc_bias;
    let q_mean = params.nominal_charge(bias);
    let trap_load = params.trap_coeff * params.mean_avalanche_charge(bias);
    if trap_load >= 1.0 {
        return Err(Error::param(
            "detector.trap_coeff",
            format!("trap_coeff * mean charge = {trap_load} is not below 1"),
        ));
    }
    let (first_lit, offset) = source.gate_alignment(gate.frequency);
    let period = 1.0 / gate.frequency;
    let model = Model {
        rng: CounterRng::new(seed),
        q_mean,
        dispersion: params.charge_dispersion,
        threshold: params.detect_threshold_charge,
        trap_per_charge: params.trap_coeff,
        decay: (-period / params.detrap_tau).exp(),
        cascade: params.afterpulse_cascade,
        p_dark: params.dark_prob_at(bias),
        mu: source.mean_photons_per_pulse,
        e_photon: params.pulse_efficiency(bias, offset, source.pulse_width),
        divisor,
        first_lit,
        period,
        jitter: params.jitter_sigma(),
    };

    let blocks = n_gates.div_ceil(block_gates);
    let primaries: Vec<Primary> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let start = b * block_gates;
            model.primaries(start, (start + block_gates).min(n_gates))
        })
        .collect::<Vec<_>>()
        .concat();
    let outcomes = model.resolve(&primaries, n_gates);
    let summary = summarize(&outcomes, n_gates, gate.frequency, divisor);
    Ok((outcomes, summary))
}

fn summarize(outcomes: &[GateOutcome], gates: u64, frequency: f64, divisor: u64) -> RunSummary {
    let mut s = RunSummary {
        gates,
        gate_frequency: frequency,
        counts: 0,
        photon_counts: 0,
        dark_counts: 0,
        afterpulse_counts: 0,
        avalanches: outcomes.len() as u64,
        total_charge: 0.0,
        registered_charge: 0.0,
        photocurrent: 0.0,
        wall_time: gates as f64 / frequency,
        sync_divisor: divisor,
        histogram: vec![0; divisor as usize],
    };
    for o in outcomes {
        s.total_charge += o.charge;
        if o.detected {
            s.counts += 1;
            s.registered_charge += o.charge;
            s.histogram[(o.gate_index % divisor) as usize] += 1;
            match o.cause {
                Cause::Photon => s.photon_counts += 1,
                Cause::Dark => s.dark_counts += 1,
                Cause::Afterpulse => s.afterpulse_counts += 1,
            }
        }
    }
    s.photocurrent = s.total_charge / s.wall_time;
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gate(f: f64, bias: f64) -> GateConfig {
        GateConfig {
            frequency: f,
            dc_bias: bias,
            ..GateConfig::default()
        }
    }

    #[test]
    fn efficiency_saturates_and_halves_at_fwhm() {
        let p = DetectorParams::default();
        assert!((p.efficiency_at(60.0, 0.0) - p.eta_max).abs() < 1e-12);
        let on = p.efficiency_at(41.0, 0.0);
        let half = p.efficiency_at(41.0, p.gate_window_fwhm / 2.0);
        assert!((half / on - 0.5).abs() < 1e-12);
        assert!((p.efficiency_at(41.0, -p.gate_window_fwhm / 2.0) / on - 0.5).abs() < 1e-12);
    }

    #[test]
    fn off_gate_photons_barely_register() {
        // Gaussian tail: exp(-4 ln2 (250/100)^2) = 2^-25
        let p = DetectorParams::default();
        let ratio = p.efficiency_at(41.0, 250e-12) / p.efficiency_at(41.0, 0.0);
        assert!((ratio - 2f64.powi(-25)).abs() < 1e-15);
        assert!(ratio < 0.02);
    }

    #[test]
    fn jitter_table_lookup() {
        assert_eq!(default_jitter_fwhm(1e9), 100e-12);
        assert_eq!(default_jitter_fwhm(2e9), 120e-12);
        assert!((default_jitter_fwhm(3e9) - 380e-12).abs() < 1e-24);
        assert_eq!(default_jitter_fwhm(0.5e9), 100e-12);
        assert!((default_jitter_fwhm(2.5e9) - 250e-12).abs() < 1e-24);
    }

    #[test]
    fn default_trap_coeff_hits_calibration_point() {
        let p = DetectorParams::default();
        let bias = p.v_breakdown + CALIBRATION_CHARGE / p.charge_slope;
        let pa = expected_afterpulse_per_count(&p, bias, 2e9);
        assert!((pa - 0.0143).abs() < 1e-12);
    }

    #[test]
    fn closed_form_afterpulse_is_linear_in_charge() {
        let p = DetectorParams::default();
        assert_eq!(
            expected_afterpulse_per_count(&p, p.v_breakdown - 1.0, 2e9),
            0.0
        );
        let a = expected_afterpulse_per_count(&p, p.v_breakdown + 0.8, 2e9);
        let b = expected_afterpulse_per_count(&p, p.v_breakdown + 1.6, 2e9);
        assert!((b - 2.0 * a).abs() < 1e-15);
    }

    #[test]
    fn release_weights_sum_to_one() {
        // brute-force the geometric series
        let (tau, f) = (5e-9, 2e9);
        let x: f64 = 1.0 / (f * tau);
        let brute: f64 = (1..2000)
            .map(|k| (1.0 - (-x).exp()) * (-(k as f64 - 1.0) * x).exp())
            .sum();
        assert!((brute - release_weight_sum(tau, f, None)).abs() < 1e-12);
        let partial: f64 = (1..=63)
            .map(|k| (1.0 - (-x).exp()) * (-(k as f64 - 1.0) * x).exp())
            .sum();
        assert!((partial - release_weight_sum(tau, f, Some(63))).abs() < 1e-12);
    }

    #[test]
    fn charge_moments_match_quadrature() {
        // midpoint-rule integration over the normal density
        let p = DetectorParams::default();
        for bias in [40.1, 40.3, 41.0, 42.5] {
            let q = p.nominal_charge(bias);
            let s = p.charge_dispersion * q;
            let (mut m, mut preg, mut mreg) = (0.0, 0.0, 0.0);
            let h = 1e-4;
            let mut z: f64 = -10.0;
            while z < 10.0 {
                let zc = z + 0.5 * h;
                let dens = (-0.5 * zc * zc).exp() / (2.0 * std::f64::consts::PI).sqrt() * h;
                let c = (q + s * zc).max(0.0);
                m += c * dens;
                if c >= p.detect_threshold_charge {
                    preg += dens;
                    mreg += c * dens;
                }
                z += h;
            }
            // the threshold step limits the midpoint rule to O(h)
            assert!((m - p.mean_avalanche_charge(bias)).abs() < 1e-6 * q);
            assert!((preg - p.registration_probability(bias)).abs() < 1e-4);
            assert!((mreg / preg - p.mean_registered_charge(bias)).abs() < 1e-3 * q);
        }
    }

    #[test]
    fn no_light_no_dark_means_nothing() {
        let p = DetectorParams {
            dark_prob: 0.0,
            ..DetectorParams::default()
        };
        let src = PhotonSource::default().laser_off();
        let (ev, s) = simulate_gates(&p, &src, &gate(2e9, 41.0), 1_000_000, 1).unwrap();
        assert!(ev.is_empty());
        assert_eq!(s.counts, 0);
        assert_eq!(s.photocurrent, 0.0);
    }

    #[test]
    fn dark_rate_within_poisson_bounds() {
        let p = DetectorParams {
            dark_prob: 1.32e-5,
            dark_bias_exponent: 0.0,
            charge_dispersion: 0.0,
            trap_coeff: 0.0,
            ..DetectorParams::default()
        };
        let src = PhotonSource::default().laser_off();
        let n = 20_000_000u64;
        let (_, s) = simulate_gates(&p, &src, &gate(2e9, 41.0), n, 77).unwrap();
        let expect = 1.32e-5 * n as f64;
        assert!(
            (s.counts as f64 - expect).abs() < 3.0 * expect.sqrt(),
            "{}",
            s.counts
        );
    }

    #[test]
    fn summary_invariants_hold() {
        let p = DetectorParams::default();
        let src = PhotonSource {
            mean_photons_per_pulse: 0.5,
            ..PhotonSource::default()
        };
        let g = gate(2e9, 40.35);
        let (ev, s) = simulate_gates(&p, &src, &g, 2_000_000, 5).unwrap();
        assert_eq!(
            s.counts,
            s.photon_counts + s.dark_counts + s.afterpulse_counts
        );
        assert_eq!(s.counts, s.histogram.iter().sum::<u64>());
        let total: f64 = ev.iter().map(|o| o.charge).sum();
        assert_eq!(total, s.total_charge);
        assert!(
            s.photocurrent
                >= s.counts as f64 * p.detect_threshold_charge * g.frequency / s.gates as f64
        );
        let mut last = None;
        for o in &ev {
            assert!(!o.detected || o.charge >= p.detect_threshold_charge);
            assert!(
                last.is_none_or(|l| o.gate_index > l),
                "one outcome per gate"
            );
            last = Some(o.gate_index);
        }
        assert!(
            ev.iter().any(|o| !o.detected),
            "low bias leaves sub-threshold avalanches"
        );
    }

    #[test]
    fn identical_regardless_of_block_size_and_threads() {
        let p = DetectorParams::default();
        let src = PhotonSource {
            mean_photons_per_pulse: 0.3,
            ..PhotonSource::default()
        };
        let g = gate(2e9, 41.5);
        let (a, sa) = simulate_gates_blocked(&p, &src, &g, 3_000_001, 9, 1 << 16).unwrap();
        let (b, sb) = simulate_gates_blocked(&p, &src, &g, 3_000_001, 9, 777).unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(3)
            .build()
            .unwrap();
        let (c, _) = pool
            .install(|| simulate_gates_blocked(&p, &src, &g, 3_000_001, 9, 10_000))
            .unwrap();
        assert_eq!(a, b);
        assert_eq!(a, c);
        assert_eq!(sa, sb);
        let (d, _) = simulate_gates(&p, &src, &g, 3_000_001, 10).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn monte_carlo_afterpulsing_matches_closed_form() {
        // Bright source, no darks: afterpulse-cause counts over photon-cause
        // counts against the closed-form expectation, 3 sigma binomial.
        let base = DetectorParams {
            dark_prob: 0.0,
            ..DetectorParams::default()
        };
        let src = PhotonSource {
            mean_photons_per_pulse: 2.0,
            ..PhotonSource::default()
        };
        for (i, excess) in [0.7, 1.2, 1.8, 2.4, 3.0].iter().enumerate() {
            let g = gate(2e9, base.v_breakdown + excess);
            let (_, s) = simulate_gates(&base, &src, &g, 10_000_000, 100 + i as u64).unwrap();
            let want = expected_afterpulse_per_count(&base, g.dc_bias, g.frequency);
            let n = s.photon_counts as f64;
            let got = s.afterpulse_counts as f64 / n;
            let sigma = (want * (1.0 - want) / n).sqrt();
            assert!(
                (got - want).abs() < 3.0 * sigma,
                "excess {excess}: {got} vs {want} +- {sigma}"
            );
        }
    }

    #[test]
    fn cascade_closed_form_matches_monte_carlo() {
        let mut p = DetectorParams {
            dark_prob: 0.0,
            afterpulse_cascade: true,
            ..DetectorParams::default()
        };
        p.trap_coeff *= 3.0;
        let src = PhotonSource {
            mean_photons_per_pulse: 2.0,
            ..PhotonSource::default()
        };
        let g = gate(2e9, 42.5);
        let (_, s) = simulate_gates(&p, &src, &g, 10_000_000, 3).unwrap();
        let want = expected_afterpulse_per_count(&p, g.dc_bias, g.frequency);
        let n = s.photon_counts as f64;
        let got = s.afterpulse_counts as f64 / n;
        // cascades make counts overdispersed; allow 4 sigma
        let sigma = (want * (1.0 + want) / n).sqrt();
        assert!((got - want).abs() < 4.0 * sigma, "{got} vs {want}");
    }

    #[test]
    fn divisor_mismatch_rejected() {
        let src = PhotonSource {
            pulse_rate: 0.3e9,
            ..PhotonSource::default()
        };
        assert!(matches!(
            simulate_gates(&DetectorParams::default(), &src, &gate(1e9, 41.0), 100, 1),
            Err(Error::DivisorMismatch { .. })
        ));
        assert!(simulate_gates(
            &DetectorParams::default(),
            &PhotonSource::default(),
            &gate(2e9, 41.0),
            0,
            1
        )
        .is_err());
    }

    #[test]
    fn oversized_trap_load_rejected() {
        let p = DetectorParams {
            trap_coeff: 1e14,
            ..DetectorParams::default()
        };
        assert!(simulate_gates(&p, &PhotonSource::default(), &gate(2e9, 42.0), 100, 1).is_err());
    }

    #[test]
    fn jittered_timestamps_have_requested_spread() {
        let p = DetectorParams {
            jitter_fwhm: 120e-12,
            dark_prob: 0.0,
            trap_coeff: 0.0,
            ..DetectorParams::default()
        };
        let src = PhotonSource {
            mean_photons_per_pulse: 5.0,
            ..PhotonSource::default()
        };
        let g = gate(2e9, 42.0);
        let (ev, _) = simulate_gates(&p, &src, &g, 2_000_000, 8).unwrap();
        let d: Vec<f64> = ev
            .iter()
            .map(|o| o.timestamp - o.gate_index as f64 / g.frequency)
            .collect();
        let n = d.len() as f64;
        let sd = (d.iter().map(|x| x * x).sum::<f64>() / n).sqrt();
        let want = 120e-12 / FWHM_PER_SIGMA;
        assert!((sd / want - 1.0).abs() < 0.05, "{sd} vs {want}");
    }

    #[test]
    fn events_csv_header() {
        let out = [GateOutcome {
            gate_index: 3,
            detected: true,
            cause: Cause::Dark,
            charge: 3.5e-14,
            timestamp: 1.5e-9,
        }];
        let mut buf = Vec::new();
        write_events_csv(&out, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "gate_index,detected,cause,charge_C,timestamp_s\n3,true,dark,3.5e-14,1.5e-9\n"
        );
    }
}
