//! Characterization procedures and estimators.
//!
//! The afterpulse probability is read from a histogram of counts per gate
//! position modulo the laser sync divisor (64 for the standard setup). The
//! illuminated position carries photon counts; the excess over a laser-off
//! baseline in every other position is attributed to afterpulsing.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::apdsim::{
    expected_dark_count_prob, expected_net_efficiency, release_weight_sum, simulate_gates,
    truncated_mean_factor, DetectorParams, PhotonSource, RunSummary,
};
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::signal::GateConfig;
use crate::stats::{linear_fit, LinearFit};

pub const PLANCK: f64 = 6.626_070_15e-34;
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Photons per second carried by optical power at a wavelength.
pub fn power_to_flux(power: f64, wavelength: f64) -> Result<f64> {
    if !(power >= 0.0) {
        return Err(Error::param("power", "must be non-negative"));
    }
    if !(wavelength > 0.0) {
        return Err(Error::param("wavelength", "must be positive"));
    }
    Ok(power * wavelength / (PLANCK * SPEED_OF_LIGHT))
}

/// Net detection efficiency from the raw count rate, with dark counts and
/// afterpulses removed. The raw value is returned even when negative.
pub fn eta_net(
    count_rate: f64,
    dark_prob: f64,
    afterpulse_prob: f64,
    flux: f64,
    frequency: f64,
) -> Result<f64> {
    if !(flux > 0.0) {
        return Err(Error::param("flux", "must be positive"));
    }
    if !(frequency > 0.0) {
        return Err(Error::param("frequency", "must be positive"));
    }
    if !(afterpulse_prob > -1.0) {
        return Err(Error::param("afterpulse_prob", "must exceed -1"));
    }
    Ok(((count_rate - dark_prob * frequency) / flux) / (1.0 + afterpulse_prob))
}

/// Count rate implied by an efficiency: the forward direction of [`eta_net`].
pub fn forward_count_rate(
    eta: f64,
    dark_prob: f64,
    afterpulse_prob: f64,
    flux: f64,
    frequency: f64,
) -> f64 {
    flux * eta * (1.0 + afterpulse_prob) + dark_prob * frequency
}

/// Total charge per registered event.
pub fn estimate_charge(photocurrent: f64, count_rate: f64) -> Result<f64> {
    if !(count_rate > 0.0) {
        return Err(Error::UndefinedEstimate("count rate is zero".into()));
    }
    Ok(photocurrent / count_rate)
}

/// How negative excesses over the dark baseline are handled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClampPolicy {
    /// Clamp each position's excess at zero before summing.
    #[default]
    PerBin,
    /// Sum signed excesses and clamp only the total. Unbiased when dark
    /// fluctuations dominate the off-peak positions.
    Total,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AfterpulseEstimate {
    pub probability: f64,
    pub peak_position: usize,
    /// Poisson 1-sigma of `probability`.
    pub sigma: f64,
}

/// Afterpulse probability per photon count with per-position clamping.
pub fn extract_afterpulse(histogram: &[u64], dark_baseline: &[u64]) -> Result<AfterpulseEstimate> {
    extract_afterpulse_with(histogram, dark_baseline, ClampPolicy::PerBin)
}

pub fn extract_afterpulse_with(
    histogram: &[u64],
    dark_baseline: &[u64],
    policy: ClampPolicy,
) -> Result<AfterpulseEstimate> {
    if histogram.len() < 2 {
        return Err(Error::param("histogram", "needs at least two positions"));
    }
    if dark_baseline.len() != histogram.len() {
        return Err(Error::param(
            "dark_baseline",
            "must have as many positions as the histogram",
        ));
    }
    let max = *histogram.iter().max().unwrap_or(&0);
    let mut tops = histogram
        .iter()
        .enumerate()
        .filter(|(_, &n)| n == max)
        .map(|(i, _)| i);
    let peak = tops.next().unwrap_or(0);
    if let Some(second) = tops.next() {
        return Err(Error::AmbiguousPeak {
            first: peak,
            second,
        });
    }
    let (np, dp) = (histogram[peak] as f64, dark_baseline[peak] as f64);
    if np <= dp {
        return Err(Error::UndefinedEstimate(
            "illuminated position does not exceed the dark baseline".into(),
        ));
    }
    let mut excess = 0.0;
    let mut var = 0.0;
    for (i, (&n, &d)) in histogram.iter().zip(dark_baseline).enumerate() {
        if i == peak {
            continue;
        }
        let e = n as f64 - d as f64;
        excess += match policy {
            ClampPolicy::PerBin => e.max(0.0),
            ClampPolicy::Total => e,
        };
        var += (n + d) as f64;
    }
    if policy == ClampPolicy::Total {
        excess = excess.max(0.0);
    }
    let signal = np - dp;
    let probability = excess / signal;
    let sigma = (var / (signal * signal) + excess * excess * (np + dp) / signal.powi(4)).sqrt();
    Ok(AfterpulseEstimate {
        probability,
        peak_position: peak,
        sigma,
    })
}

/// Field names mirror the JSON summary.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationResult {
    /// Raw count rate C, Hz.
    pub raw_count_rate: f64,
    /// Dark counts per gate.
    pub dark_prob: f64,
    /// Afterpulses per registered photon count; `None` without photon signal.
    pub afterpulse_prob: Option<f64>,
    pub net_efficiency: f64,
    /// Charge per registered event, coulombs; `None` without counts.
    pub charge_estimate: Option<f64>,
    pub gate_frequency: f64,
    pub photon_flux: f64,
}

/// Poisson 1-sigma errors of the measured quantities.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CharacterizationSigma {
    pub raw_count_rate: f64,
    pub dark_prob: f64,
    pub afterpulse_prob: Option<f64>,
    pub net_efficiency: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Characterization {
    pub bias: f64,
    pub result: CharacterizationResult,
    pub sigma: CharacterizationSigma,
    pub peak_position: Option<usize>,
    /// Mean charge of registered events, from the simulator's own records.
    pub true_mean_registered_charge: Option<f64>,
    pub dark: RunSummary,
    pub illuminated: RunSummary,
}

/// One operating point: a laser-off run for the dark baseline and an
/// illuminated run, each over `n_gates` gates.
pub fn characterize(
    params: &DetectorParams,
    source: &PhotonSource,
    gate: &GateConfig,
    n_gates: u64,
    seed: u64,
    policy: ClampPolicy,
) -> Result<Characterization> {
    if !(source.mean_photons_per_pulse > 0.0) {
        return Err(Error::param(
            "source.mean_photons_per_pulse",
            "characterization needs a lit source",
        ));
    }
    let (_, dark) = simulate_gates(
        params,
        &source.laser_off(),
        gate,
        n_gates,
        derive_seed(seed, 0),
    )?;
    let (_, lit) = simulate_gates(params, source, gate, n_gates, derive_seed(seed, 1))?;
    Ok(reduce(gate, source, dark, lit, policy))
}

fn reduce(
    gate: &GateConfig,
    source: &PhotonSource,
    dark: RunSummary,
    lit: RunSummary,
    policy: ClampPolicy,
) -> Characterization {
    let f = gate.frequency;
    let flux = source.photon_flux();
    let gates = lit.gates as f64;
    let wall = lit.wall_time;
    let raw_count_rate = lit.count_rate();
    let dark_prob = dark.counts as f64 / dark.gates as f64;
    let ap = extract_afterpulse_with(&lit.histogram, &dark.histogram, policy).ok();
    let pa = ap.map_or(0.0, |a| a.probability);
    let numerator = (lit.counts as f64 - dark.counts as f64) / wall / flux;
    let net_efficiency = numerator / (1.0 + pa);
    let num_sigma = ((lit.counts + dark.counts) as f64).sqrt() / wall / flux;
    let pa_sigma = ap.map_or(0.0, |a| a.sigma);
    let eta_sigma = (num_sigma.powi(2) / (1.0 + pa).powi(2)
        + numerator.powi(2) * pa_sigma.powi(2) / (1.0 + pa).powi(4))
    .sqrt();
    let result = CharacterizationResult {
        raw_count_rate,
        dark_prob,
        afterpulse_prob: ap.map(|a| a.probability),
        net_efficiency,
        charge_estimate: estimate_charge(lit.photocurrent, raw_count_rate).ok(),
        gate_frequency: f,
        photon_flux: flux,
    };
    let sigma = CharacterizationSigma {
        raw_count_rate: (lit.counts as f64).sqrt() / wall,
        dark_prob: (dark.counts as f64).sqrt() / gates,
        afterpulse_prob: ap.map(|a| a.sigma),
        net_efficiency: eta_sigma,
    };
    Characterization {
        bias: gate.dc_bias,
        result,
        sigma,
        peak_position: ap.map(|a| a.peak_position),
        true_mean_registered_charge: lit.mean_registered_charge(),
        dark,
        illuminated: lit,
    }
}

/// Characterizes every bias in `biases`; each point draws from its own
/// substream of `seed`, so the order of evaluation does not matter.
pub fn bias_sweep(
    params: &DetectorParams,
    source: &PhotonSource,
    gate: &GateConfig,
    biases: &[f64],
    gates_per_point: u64,
    seed: u64,
    policy: ClampPolicy,
) -> Result<Vec<Characterization>> {
    if biases.len() < 5 {
        return Err(Error::param("biases", "a sweep needs at least 5 points"));
    }
    biases
        .par_iter()
        .enumerate()
        .map(|(i, &bias)| {
            let g = GateConfig {
                dc_bias: bias,
                ..*gate
            };
            characterize(
                params,
                source,
                &g,
                gates_per_point,
                derive_seed(seed, i as u64),
                policy,
            )
        })
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".to_string(), |x| format!("{x:?}"))
}

pub fn write_bias_sweep_csv<W: Write>(
    rows: &[Characterization],
    mut out: W,
) -> std::io::Result<()> {
    writeln!(out, "bias_v,count_rate_hz,p_d_per_gate,p_a,eta_net,q_c")?;
    for r in rows {
        let c = &r.result;
        writeln!(
            out,
            "{:?},{:?},{:?},{},{:?},{}",
            r.bias,
            c.raw_count_rate,
            c.dark_prob,
            opt(c.afterpulse_prob),
            c.net_efficiency,
            opt(c.charge_estimate)
        )?;
    }
    out.flush()
}

/// Bias above which the mean charge is at least twice the threshold, so
/// nearly every avalanche registers.
pub fn saturation_bias(params: &DetectorParams) -> f64 {
    params.v_breakdown + 2.0 * params.detect_threshold_charge / params.charge_slope
}

/// Linear fit of afterpulse probability against the charge estimate over
/// sweep points at or above `min_bias`.
pub fn afterpulse_charge_fit(rows: &[Characterization], min_bias: f64) -> Option<LinearFit> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
        .iter()
        .filter(|r| r.bias >= min_bias)
        .filter_map(|r| Some((r.result.charge_estimate?, r.result.afterpulse_prob?)))
        .unzip();
    linear_fit(&xs, &ys)
}

/// Target values for a planted operating point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub gate_frequency: f64,
    pub net_efficiency: f64,
    pub afterpulse_prob: f64,
    pub dark_prob: f64,
}

/// Adjusts `base` so that, at `gate.dc_bias` with `source`, the model's
/// expected net efficiency, afterpulse probability and dark count
/// probability equal the targets. The trap coefficient is kept and the
/// charge slope moved instead.
pub fn plant_operating_point(
    base: &DetectorParams,
    source: &PhotonSource,
    gate: &GateConfig,
    target: &OperatingPoint,
) -> Result<DetectorParams> {
    let bias = gate.dc_bias;
    let excess = bias - base.v_breakdown;
    if !(excess > 0.0) {
        return Err(Error::param(
            "gate.dc_bias",
            "must exceed breakdown to plant a point",
        ));
    }
    if !(base.trap_coeff > 0.0) && target.afterpulse_prob > 0.0 {
        return Err(Error::param("detector.trap_coeff", "must be positive"));
    }
    let mut p = *base;
    // Afterpulse probability fixes the mean charge.
    let per_slope = p.trap_coeff
        * excess
        * truncated_mean_factor(p.charge_dispersion)
        * release_weight_sum(p.detrap_tau, target.gate_frequency, None);
    let linear = if p.afterpulse_cascade {
        target.afterpulse_prob / (1.0 + target.afterpulse_prob)
    } else {
        target.afterpulse_prob
    };
    p.charge_slope = linear / per_slope;
    // Efficiency fixes eta_max given registration and pulse averaging.
    let mu = source.mean_photons_per_pulse;
    let p_reg = p.registration_probability(bias);
    let arg = 1.0 - target.net_efficiency * mu / p_reg;
    if !(arg > 0.0) || !(p_reg > 0.0) {
        return Err(Error::param(
            "target.net_efficiency",
            "not reachable at this bias",
        ));
    }
    let per_pulse = -arg.ln() / mu;
    let (_, offset) = source.gate_alignment(gate.frequency);
    let mut unit = p;
    unit.eta_max = 0.5;
    let shape = unit.pulse_efficiency(bias, offset, source.pulse_width) / 0.5;
    p.eta_max = per_pulse / shape;
    if !(p.eta_max < 1.0) {
        return Err(Error::param("target.net_efficiency", "needs eta_max >= 1"));
    }
    // Dark probability at this bias, afterpulses of dark avalanches included.
    p.dark_ref_bias = bias;
    p.dark_prob = target.dark_prob / (p_reg * (1.0 + target.afterpulse_prob));
    p.validate()?;
    debug_assert!(
        (expected_net_efficiency(&p, source, gate) - target.net_efficiency).abs()
            < 1e-9 * target.net_efficiency.max(1e-12)
    );
    debug_assert!(
        (expected_dark_count_prob(&p, bias, gate.frequency) - target.dark_prob).abs()
            < 1e-9 * target.dark_prob.max(1e-300)
    );
    Ok(p)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayPoint {
    pub delay: f64,
    pub count_rate: f64,
    pub photocurrent: f64,
    pub counts: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    pub position: f64,
    pub height: f64,
    /// Full width at half maximum above the scan baseline; `None` when a
    /// half-maximum crossing falls outside the grid.
    pub fwhm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DelayScanResult {
    pub gate_frequency: f64,
    pub gates_per_point: u64,
    pub grid_step: f64,
    pub points: Vec<DelayPoint>,
    pub peaks: Vec<Peak>,
    pub mean_peak_spacing: Option<f64>,
    pub mean_fwhm: Option<f64>,
    /// Laser-off reference over the same number of gates.
    pub dark_count_rate: f64,
    pub dark_counts: u64,
}

impl DelayScanResult {
    /// Grid points nearest to the midpoints between adjacent peaks.
    pub fn inter_peak_points(&self) -> Vec<DelayPoint> {
        self.peaks
            .windows(2)
            .filter_map(|w| {
                let mid = 0.5 * (w[0].position + w[1].position);
                self.points
                    .iter()
                    .min_by(|a, b| (a.delay - mid).abs().total_cmp(&(b.delay - mid).abs()))
                    .copied()
            })
            .collect()
    }
}

/// Steps the laser delay across `delays`, recording count rate and
/// photocurrent at each point.
pub fn run_delay_scan(
    params: &DetectorParams,
    source: &PhotonSource,
    gate: &GateConfig,
    delays: &[f64],
    gates_per_point: u64,
    seed: u64,
) -> Result<DelayScanResult> {
    if delays.len() < 3 {
        return Err(Error::param("delays", "need at least three grid points"));
    }
    let step = (delays[delays.len() - 1] - delays[0]) / (delays.len() - 1) as f64;
    let coarse = delays
        .windows(2)
        .any(|w| !(w[1] > w[0]) || w[1] - w[0] > params.gate_window_fwhm / 4.0 * (1.0 + 1e-9));
    if coarse {
        return Err(Error::param(
            "delays",
            format!(
                "grid must increase in steps no larger than a quarter of the {:e} s gate window",
                params.gate_window_fwhm
            ),
        ));
    }
    let points = delays
        .par_iter()
        .enumerate()
        .map(|(i, &delay)| {
            let src = PhotonSource { delay, ..*source };
            let (_, s) = simulate_gates(
                params,
                &src,
                gate,
                gates_per_point,
                derive_seed(seed, i as u64),
            )?;
            Ok(DelayPoint {
                delay,
                count_rate: s.count_rate(),
                photocurrent: s.photocurrent,
                counts: s.counts,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (_, dark) = simulate_gates(
        params,
        &source.laser_off(),
        gate,
        gates_per_point,
        derive_seed(seed, u64::MAX),
    )?;
    let xs: Vec<f64> = points.iter().map(|p| p.delay).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.count_rate).collect();
    let peaks = find_peaks(&xs, &ys);
    let spacing = (peaks.len() >= 2)
        .then(|| (peaks[peaks.len() - 1].position - peaks[0].position) / (peaks.len() - 1) as f64);
    let widths: Vec<f64> = peaks.iter().filter_map(|p| p.fwhm).collect();
    Ok(DelayScanResult {
        gate_frequency: gate.frequency,
        gates_per_point,
        grid_step: step,
        points,
        peaks,
        mean_peak_spacing: spacing,
        mean_fwhm: (!widths.is_empty()).then(|| widths.iter().sum::<f64>() / widths.len() as f64),
        dark_count_rate: dark.count_rate(),
        dark_counts: dark.counts,
    })
}

pub fn write_delay_scan_csv<W: Write>(scan: &DelayScanResult, mut out: W) -> std::io::Result<()> {
    writeln!(out, "delay_s,count_rate_hz,photocurrent_a")?;
    for p in &scan.points {
        writeln!(out, "{:?},{:?},{:?}", p.delay, p.count_rate, p.photocurrent)?;
    }
    out.flush()
}

/// Peaks are maximal runs above the half-maximum level, measured from the
/// curve minimum to its maximum. Each run's width comes from linear
/// interpolation of its two crossings, with the half level taken relative
/// to that run's own height.
pub fn find_peaks(xs: &[f64], ys: &[f64]) -> Vec<Peak> {
    let n = ys.len();
    if n < 3 || xs.len() != n {
        return Vec::new();
    }
    let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Vec::new();
    }
    let gate_level = lo + 0.5 * (hi - lo);
    let mut peaks = Vec::new();
    let mut i = 0;
    while i < n {
        if ys[i] <= gate_level {
            i += 1;
            continue;
        }
        let start = i;
        while i < n && ys[i] > gate_level {
            i += 1;
        }
        let end = i; // exclusive
        let top = (start..end)
            .max_by(|&a, &b| ys[a].total_cmp(&ys[b]))
            .unwrap_or(start);
        let half = lo + 0.5 * (ys[top] - lo);
        let crossing = |a: usize, b: usize| {
            let t = (half - ys[a]) / (ys[b] - ys[a]);
            xs[a] + t * (xs[b] - xs[a])
        };
        let left = (0..top)
            .rev()
            .find(|&k| ys[k] <= half)
            .map(|k| crossing(k, k + 1));
        let right = (top + 1..n)
            .find(|&k| ys[k] <= half)
            .map(|k| crossing(k - 1, k));
        let touches_edge = start == 0 || end == n;
        let fwhm = match (left, right) {
            (Some(l), Some(r)) if !touches_edge => Some(r - l),
            _ => None,
        };
        let position = match (left, right) {
            (Some(l), Some(r)) if !touches_edge => 0.5 * (l + r),
            _ => xs[top],
        };
        peaks.push(Peak {
            position,
            height: ys[top],
            fwhm,
        });
    }
    peaks
}

/// Fundamental period, in grid steps, of a mean-removed curve: the first
/// autocorrelation maximum past the central lobe that comes within 80% of
/// the strongest one. Later maxima are multiples of the period.
///
/// Runs above the midlevel that touch either end of the curve are dropped
/// first: a peak cut by the grid edge has its centroid pulled inward, which
/// drags the correlation maximum toward shorter lags.
pub fn autocorrelation_period(ys: &[f64]) -> Option<usize> {
    if ys.len() < 4 {
        return None;
    }
    let (lo, hi) = ys
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &y| {
            (a.min(y), b.max(y))
        });
    let mid = 0.5 * (lo + hi);
    let first = ys.iter().position(|&y| y < mid)?;
    let last = ys.iter().rposition(|&y| y < mid)?;
    let ys = &ys[first..=last];
    let n = ys.len();
    if n < 4 {
        return None;
    }
    let mean = ys.iter().sum::<f64>() / n as f64;
    let d: Vec<f64> = ys.iter().map(|y| y - mean).collect();
    let ac: Vec<f64> = (0..=n / 2)
        .map(|lag| d.iter().zip(&d[lag..]).map(|(a, b)| a * b).sum::<f64>() / (n - lag) as f64)
        .collect();
    let first_negative = (1..ac.len()).find(|&l| ac[l] < 0.0)?;
    let best = ac[first_negative..]
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    if !(best > 0.0) {
        return None;
    }
    (first_negative..ac.len() - 1)
        .find(|&l| ac[l] >= 0.8 * best && ac[l] >= ac[l - 1] && ac[l] >= ac[l + 1])
}
