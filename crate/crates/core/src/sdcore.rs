//! Tunable self-differencing front-end.
//!
//! The APD output is split with ratio `r` into a direct arm and a delayed
//! arm, and the delayed copy is subtracted:
//!
//! ```text
//! y(t) = (1 - r) x(t) - r x(t - D),   D = nominal_delay + stretcher_trim
//! ```
//!
//! Anything periodic in `D` cancels; an isolated avalanche survives as a
//! positive pulse followed by an inverted replica `D` later. Fractional
//! sample delays use a Kaiser-windowed sinc kernel.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::Waveform;

/// Tuning range of the co-axial line stretcher.
pub const MAX_STRETCHER_TRIM: f64 = 45e-12;

/// Reports are clamped to this value instead of going infinite.
pub const SUPPRESSION_CEILING_DB: f64 = 140.0;

/// Minimum delay length in samples for the fractional-delay kernel.
pub const MIN_SAMPLES_PER_DELAY: f64 = 32.0;

pub const DEFAULT_INTERP_TAPS: usize = 16;

/// Kaiser shape parameter for the interpolation window.
pub const KAISER_BETA: f64 = 10.0;

// Slack for trim comparisons, far below the 1 fs a 1 kHz detune moves it.
const TRIM_EPS: f64 = 1e-19;

fn default_taps() -> usize {
    DEFAULT_INTERP_TAPS
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdConfig {
    /// Gate cycles spanned by the delay line.
    pub delay_cycles: u32,
    /// Fixed line length, seconds.
    pub nominal_delay: f64,
    /// Line-stretcher setting in `[0, 45 ps]`.
    pub stretcher_trim: f64,
    /// Amplitude fraction sent to the delayed arm.
    pub split_ratio: f64,
    /// Length of the fractional-delay kernel (even).
    #[serde(default = "default_taps")]
    pub interp_taps: usize,
}

impl Default for SdConfig {
    /// One-cycle 1 ns line balanced at 1 GHz.
    fn default() -> Self {
        Self {
            delay_cycles: 1,
            nominal_delay: 1e-9 - 12.5e-12,
            stretcher_trim: 12.5e-12,
            split_ratio: 0.5,
            interp_taps: DEFAULT_INTERP_TAPS,
        }
    }
}

impl SdConfig {
    pub fn effective_delay(&self) -> f64 {
        self.nominal_delay + self.stretcher_trim
    }

    /// Frequencies the line can be tuned to, `[low, high]` in Hz.
    pub fn reachable_band(&self) -> (f64, f64) {
        let c = self.delay_cycles as f64;
        (
            c / (self.nominal_delay + MAX_STRETCHER_TRIM),
            c / self.nominal_delay,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.delay_cycles == 0 {
            return Err(Error::param("sd.delay_cycles", "must be at least 1"));
        }
        if !(self.nominal_delay > 0.0) {
            return Err(Error::param("sd.nominal_delay", "must be positive"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::param("sd.split_ratio", "must lie in (0, 1)"));
        }
        if !(self.stretcher_trim >= -TRIM_EPS
            && self.stretcher_trim <= MAX_STRETCHER_TRIM + TRIM_EPS)
        {
            return Err(Error::OutOfRange {
                what: "stretcher trim",
                low: 0.0,
                high: MAX_STRETCHER_TRIM,
            });
        }
        if self.interp_taps < 4 || !self.interp_taps.is_multiple_of(2) {
            return Err(Error::param(
                "sd.interp_taps",
                "must be even and at least 4",
            ));
        }
        Ok(())
    }
}

/// Modified Bessel function of the first kind, order zero.
fn bessel_i0(x: f64) -> f64 {
    let q = 0.25 * x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k as f64 * k as f64);
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = PI * x;
        px.sin() / px
    }
}

/// Kernel realizing a delay of `integer + frac` samples.
#[derive(Clone, Debug, PartialEq)]
pub struct FractionalDelay {
    integer: usize,
    /// `(offset j, weight)`: output `i` reads input `i - integer - j`.
    taps: Vec<(i64, f64)>,
}

impl FractionalDelay {
    pub fn new(delay_samples: f64, n_taps: usize) -> Self {
        let mut integer = delay_samples.floor();
        let mut frac = delay_samples - integer;
        if frac > 1.0 - 1e-9 {
            integer += 1.0;
            frac = 0.0;
        }
        let integer = integer as usize;
        if frac < 1e-9 {
            return Self {
                integer,
                taps: vec![(0, 1.0)],
            };
        }
        let half = (n_taps / 2) as i64;
        let norm = bessel_i0(KAISER_BETA);
        let mut taps: Vec<(i64, f64)> = (-(half - 1)..=half)
            .map(|j| {
                let x = j as f64 - frac;
                let r = x / half as f64;
                let w = bessel_i0(KAISER_BETA * (1.0 - r * r).max(0.0).sqrt()) / norm;
                (j, sinc(x) * w)
            })
            .collect();
        let sum: f64 = taps.iter().map(|t| t.1).sum();
        for t in &mut taps {
            t.1 /= sum;
        }
        Self { integer, taps }
    }

    /// First output index for which every tap reads a valid input sample.
    pub fn first_valid(&self) -> usize {
        let max_j = self.taps.iter().map(|t| t.0).max().unwrap_or(0).max(0) as usize;
        self.integer + max_j
    }

    /// Delayed sample at index `i`; requires `i >= first_valid()`.
    #[inline]
    pub fn sample(&self, x: &[f64], i: usize) -> f64 {
        let base = (i - self.integer) as i64;
        self.taps
            .iter()
            .map(|&(j, w)| w * x[(base - j) as usize])
            .sum()
    }
}

/// Runs the input through the self-differencing circuit. The returned
/// waveform starts after the warm-up span (one delay plus the kernel
/// half-length), where the delayed arm is not yet defined.
pub fn apply_sd(input: &Waveform, cfg: &SdConfig) -> Result<Waveform> {
    cfg.validate()?;
    let fs = input.sample_rate();
    let delay = cfg.effective_delay();
    let delay_samples = delay * fs;
    if delay_samples < MIN_SAMPLES_PER_DELAY {
        return Err(Error::Sampling(format!(
            "delay spans {delay_samples:.2} samples; at least {MIN_SAMPLES_PER_DELAY} are needed"
        )));
    }
    if (input.len() as f64) < 2.0 * delay_samples {
        return Err(Error::TooShort(format!(
            "input spans {:e} s, needs at least twice the delay {:e} s",
            input.duration(),
            delay
        )));
    }
    let kernel = FractionalDelay::new(delay_samples, cfg.interp_taps);
    let first = kernel.first_valid();
    let x = input.samples();
    if first >= x.len() {
        return Err(Error::TooShort("no samples left after warm-up".into()));
    }
    let r = cfg.split_ratio;
    let out: Vec<f64> = (first..x.len())
        .map(|i| (1.0 - r) * x[i] - r * kernel.sample(x, i))
        .collect();
    Waveform::new(fs, input.time(first), out)
}

/// Returns `cfg` with the stretcher trimmed so that the effective delay is
/// exactly `delay_cycles / target`.
pub fn tune_to_frequency(target: f64, cfg: &SdConfig) -> Result<SdConfig> {
    if !(target > 0.0) || !target.is_finite() {
        return Err(Error::param("target", "must be a positive frequency"));
    }
    if cfg.delay_cycles == 0 || !(cfg.nominal_delay > 0.0) {
        return Err(Error::param(
            "sd",
            "delay_cycles and nominal_delay must be set",
        ));
    }
    let trim = cfg.delay_cycles as f64 / target - cfg.nominal_delay;
    if !(-TRIM_EPS..=MAX_STRETCHER_TRIM + TRIM_EPS).contains(&trim) {
        let (low, high) = cfg.reachable_band();
        return Err(Error::OutOfRange {
            what: "target frequency",
            low,
            high,
        });
    }
    Ok(SdConfig {
        stretcher_trim: trim.clamp(0.0, MAX_STRETCHER_TRIM),
        ..*cfg
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuppressionReport {
    #[serde(rename = "harmonic_db")]
    pub harmonic_suppression_db: f64,
    pub harmonic_hz: f64,
    #[serde(rename = "broadband_db")]
    pub broadband_cancellation_db: f64,
}

fn ratio_db(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        return SUPPRESSION_CEILING_DB;
    }
    (20.0 * (num / den).log10()).clamp(0.0, SUPPRESSION_CEILING_DB)
}

/// Compares SD input and output over their common span, truncated to a
/// whole number of periods of `at` when at least one fits.
pub fn measure_suppression(
    input: &Waveform,
    output: &Waveform,
    at: f64,
) -> Result<SuppressionReport> {
    if !(at > 0.0) {
        return Err(Error::param("at", "probe frequency must be positive"));
    }
    if input.sample_rate() != output.sample_rate() {
        return Err(Error::Incompatible("sample rates differ".into()));
    }
    let fs = input.sample_rate();
    let t0 = input.start_time().max(output.start_time());
    let skip = |w: &Waveform| ((t0 - w.start_time()) * fs).round() as usize;
    let (si, so) = (skip(input), skip(output));
    let avail = (input.len().saturating_sub(si)).min(output.len().saturating_sub(so));
    if avail == 0 {
        return Err(Error::Incompatible("waveforms do not overlap".into()));
    }
    let periods = (avail as f64 * at / fs).floor();
    let n = if periods >= 1.0 {
        ((periods * fs / at).round() as usize).min(avail)
    } else {
        avail
    };
    let win_in = input.window(input.time(si), n)?;
    let win_out = output.window(output.time(so), n)?;
    if (win_in.start_time() - win_out.start_time()).abs() > 0.5 / fs {
        return Err(Error::Incompatible("time grids are not aligned".into()));
    }
    let rms_in = win_in.rms();
    if rms_in == 0.0 {
        return Err(Error::UndefinedEstimate("input carries no power".into()));
    }
    Ok(SuppressionReport {
        harmonic_suppression_db: ratio_db(win_in.amplitude_at(at), win_out.amplitude_at(at)),
        harmonic_hz: at,
        broadband_cancellation_db: ratio_db(rms_in, win_out.rms()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signal::{
        capacitive_feedthrough, inject_avalanche, synth_gate_train, GateConfig, PulseShape,
    };
    use proptest::prelude::*;

    const FS: f64 = 64e9;

    fn sine(f: f64, n: usize) -> Waveform {
        let s = (0..n)
            .map(|i| (2.0 * PI * f * i as f64 / FS).sin())
            .collect();
        Waveform::new(FS, 0.0, s).unwrap()
    }

    fn sd(delay: f64, r: f64) -> SdConfig {
        SdConfig {
            delay_cycles: 1,
            nominal_delay: delay,
            stretcher_trim: 0.0,
            split_ratio: r,
            interp_taps: DEFAULT_INTERP_TAPS,
        }
    }

    fn gate(f: f64) -> GateConfig {
        GateConfig {
            frequency: f,
            amplitude: 7.1,
            dc_bias: 0.0,
            analog_bandwidth: 5e9,
        }
    }

    #[test]
    fn kernel_reproduces_delayed_sinusoid() {
        // Independent oracle: evaluate the continuous sinusoid at t - D.
        let f = 3e9;
        let n = 512;
        let x = sine(f, n);
        for d in [40.0, 40.25, 40.5, 63.9] {
            let k = FractionalDelay::new(d, 16);
            for i in k.first_valid()..n {
                let want = (2.0 * PI * f * (i as f64 - d) / FS).sin();
                assert!((k.sample(x.samples(), i) - want).abs() < 1e-4, "d={d}");
            }
        }
    }

    #[test]
    fn perfect_balance_cancels_periodic_input() {
        // 1.01 GHz puts the period on a fractional number of samples.
        let f = 1.01e9;
        let g = synth_gate_train(&gate(f), 40e-9, FS).unwrap();
        let cfg = sd(1.0 / f, 0.5);
        let y = apply_sd(&g.scaled(1.0), &cfg).unwrap();
        let x = g.window(y.start_time(), y.len()).unwrap();
        let residual_db = 20.0 * (x.rms() / y.rms()).log10();
        assert!(residual_db > 80.0, "{residual_db}");
    }

    #[test]
    fn detuned_sinusoid_leaves_sin_pi_f_dt() {
        let f = 1e9;
        for dt in [5e-12, 20e-12, 0.25e-12] {
            let x = sine(f, 6400);
            let y = apply_sd(&x, &sd(1.0 / f + dt, 0.5)).unwrap();
            let got = y.window(y.start_time(), 64 * 90).unwrap().amplitude_at(f);
            let want = (PI * f * dt).sin();
            assert!(
                ((got - want) / want).abs() < 1e-3,
                "dt={dt}: {got} vs {want}"
            );
        }
    }

    #[test]
    fn avalanche_leaves_pulse_and_inverted_replica() {
        let base = Waveform::new(FS, 0.0, vec![0.0; 640]).unwrap();
        let t0 = 2.5e-9;
        let x = inject_avalanche(&base, t0, 0.05e-12, &PulseShape::default()).unwrap();
        for r in [0.5, 0.3] {
            let y = apply_sd(&x, &sd(1e-9, r)).unwrap();
            let (imax, vmax) = y
                .samples()
                .iter()
                .enumerate()
                .fold((0, f64::MIN), |a, (i, &v)| if v > a.1 { (i, v) } else { a });
            let (imin, vmin) = y
                .samples()
                .iter()
                .enumerate()
                .fold((0, f64::MAX), |a, (i, &v)| if v < a.1 { (i, v) } else { a });
            assert!((y.time(imax) - t0).abs() < 0.5 / FS);
            assert!((y.time(imin) - (t0 + 1e-9)).abs() < 0.5 / FS);
            assert!((vmin / vmax + r / (1.0 - r)).abs() < 1e-12);
        }
    }

    #[test]
    fn replica_cross_correlation_peaks_negative_at_delay() {
        let base = Waveform::new(FS, 0.0, vec![0.0; 1024]).unwrap();
        let x = inject_avalanche(&base, 3e-9, 0.05e-12, &PulseShape::default()).unwrap();
        let y = apply_sd(&x, &sd(1e-9 + 7.3e-12, 0.5)).unwrap();
        let s = y.samples();
        let lag_of_min = (1..400)
            .min_by(|&a, &b| {
                let c = |l: usize| s.iter().zip(&s[l..]).map(|(p, q)| p * q).sum::<f64>();
                c(a).total_cmp(&c(b))
            })
            .unwrap();
        assert_eq!(lag_of_min, ((1e-9 + 7.3e-12) * FS).round() as usize);
    }

    #[test]
    fn warmup_is_excluded() {
        let x = sine(1e9, 640);
        let y = apply_sd(&x, &sd(1e-9 + 3e-12, 0.5)).unwrap();
        assert!(y.start_time() >= 1e-9);
    }

    #[test]
    fn apply_sd_errors() {
        let short = sine(1e9, 100);
        assert!(matches!(
            apply_sd(&short, &sd(1e-9, 0.5)),
            Err(Error::TooShort(_))
        ));
        let slow = Waveform::new(16e9, 0.0, vec![0.0; 1000]).unwrap();
        assert!(matches!(
            apply_sd(&slow, &sd(1e-9, 0.5)),
            Err(Error::Sampling(_))
        ));
        let mut bad = sd(1e-9, 0.5);
        bad.stretcher_trim = 50e-12;
        assert!(matches!(
            apply_sd(&sine(1e9, 640), &bad),
            Err(Error::OutOfRange { .. })
        ));
        bad.stretcher_trim = 0.0;
        bad.split_ratio = 1.0;
        assert!(apply_sd(&sine(1e9, 640), &bad).is_err());
    }

    #[test]
    fn tune_examples() {
        let line = SdConfig {
            nominal_delay: 0.9875e-9,
            stretcher_trim: 0.0,
            ..SdConfig::default()
        };
        let t = tune_to_frequency(1e9, &line).unwrap();
        assert!((t.stretcher_trim - 12.5e-12).abs() < 1e-21);
        // arithmetic oracle for the band ends: trim in {0, 45 ps}
        let lo = 1.0 / (0.9875e-9 + 45e-12);
        let hi = 1.0 / 0.9875e-9;
        match tune_to_frequency(0.95e9, &line) {
            Err(Error::OutOfRange { low, high, .. }) => {
                assert!((low - lo).abs() < 1.0 && (high - hi).abs() < 1.0);
                assert!((low - 0.968523e9).abs() < 1e3);
                assert!((high - 1.012658e9).abs() < 1e3);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn tuned_square_cancels_broadband() {
        let line = SdConfig {
            nominal_delay: 0.9875e-9,
            ..SdConfig::default()
        };
        for f in [0.97e9, 1.0e9, 1.0113e9] {
            let cfg = tune_to_frequency(f, &line).unwrap();
            let g = synth_gate_train(&gate(f), 30e-9, FS).unwrap();
            let ft = capacitive_feedthrough(&g, 0.5e-12).unwrap();
            // one-sided derivative endpoints are not periodic
            let ft = ft.window(ft.time(1), ft.len() - 2).unwrap();
            let y = apply_sd(&ft, &cfg).unwrap();
            let rep = measure_suppression(&ft, &y, f).unwrap();
            assert!(rep.broadband_cancellation_db >= 60.0, "{f}: {rep:?}");
        }
    }

    #[test]
    fn identical_waveforms_report_zero() {
        let x = sine(1e9, 640);
        let rep = measure_suppression(&x, &x, 1e9).unwrap();
        assert!(rep.harmonic_suppression_db.abs() < 1e-9);
        assert!(rep.broadband_cancellation_db.abs() < 1e-9);
    }

    #[test]
    fn ratio_imbalance_matches_closed_form() {
        // residual of a perfectly delayed periodic input is (1 - r) - r
        let g = synth_gate_train(&gate(1e9), 20e-9, FS).unwrap();
        for r in [0.5063, 0.51, 0.45] {
            let y = apply_sd(&g.scaled(1.0), &sd(1e-9, r)).unwrap();
            let rep = measure_suppression(&g, &y, 1e9).unwrap();
            let want = 20.0 * (1.0 / (1.0 - 2.0 * r).abs()).log10();
            assert!((rep.broadband_cancellation_db - want).abs() < 1e-6);
            assert!((rep.harmonic_suppression_db - want).abs() < 1e-6);
        }
    }

    #[test]
    fn delay_error_matches_closed_form() {
        let g = synth_gate_train(&gate(1e9), 20e-9, FS).unwrap();
        let dt = 0.25e-12;
        let y = apply_sd(&g, &sd(1e-9 + dt, 0.5)).unwrap();
        let rep = measure_suppression(&g, &y, 1e9).unwrap();
        // |0.5 (1 - exp(-j w (T + dt)))| = sin(pi f dt)
        let want = -20.0 * (PI * 1e9 * dt).sin().log10();
        assert!(
            (rep.harmonic_suppression_db - want).abs() < 0.05,
            "{rep:?} {want}"
        );
    }

    #[test]
    fn ceiling_clamps_perfect_cancellation() {
        let g = synth_gate_train(&gate(1e9), 20e-9, FS).unwrap();
        let y = apply_sd(&g.scaled(1.0), &sd(1e-9, 0.5)).unwrap();
        let rep = measure_suppression(&g, &y, 1e9).unwrap();
        assert_eq!(rep.harmonic_suppression_db, SUPPRESSION_CEILING_DB);
        let json = serde_json::to_value(rep).unwrap();
        for key in ["harmonic_db", "harmonic_hz", "broadband_db"] {
            assert!(json.get(key).is_some());
        }
    }

    #[test]
    fn harmonic_suppression_monotone_in_delay_error() {
        let f = 1e9;
        let x = sine(f, 64 * 40);
        let mut last = f64::INFINITY;
        for k in 0..=20 {
            let dt = k as f64 * 0.5 / f / 20.0;
            let y = apply_sd(&x, &sd(1.0 / f + dt, 0.5)).unwrap();
            let rep = measure_suppression(&x, &y, f).unwrap();
            assert!(rep.harmonic_suppression_db <= last + 1e-9);
            last = rep.harmonic_suppression_db;
        }
    }

    proptest! {
        #[test]
        fn sd_is_linear(
            a in -2.0f64..2.0,
            b in -2.0f64..2.0,
            trim in 0.0f64..45e-12,
            r in 0.05f64..0.95,
            seed in 0u64..500,
        ) {
            let x = sine(1.3e9, 300);
            let y = crate::signal::add_noise(&x.scaled(0.0), 0.3, seed).unwrap();
            let cfg = SdConfig { stretcher_trim: trim, split_ratio: r, ..sd(1e-9, 0.5) };
            let lhs = apply_sd(&x.combine(a, &y, b).unwrap(), &cfg).unwrap();
            let rhs = apply_sd(&x, &cfg).unwrap().combine(a, &apply_sd(&y, &cfg).unwrap(), b).unwrap();
            for (l, r) in lhs.samples().iter().zip(rhs.samples()) {
                prop_assert!((l - r).abs() < 1e-12);
            }
        }
    }
}
