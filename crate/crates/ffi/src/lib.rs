//! C ABI over the `sdapd` simulator.
//!
//! Every fallible call returns an [`SdapdStatus`]; on failure a message is
//! kept per thread and read with [`sdapd_last_error`]. Long-lived state sits
//! behind opaque handles that the caller releases with the matching
//! `*_free` function. Variable-length outputs use caller-provided buffers:
//! pass a capacity, get back the required length, and
//! `SDAPD_STATUS_BUFFER_TOO_SMALL` if it did not fit.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use sdapd::apdsim::{simulate_gates, DetectorParams, PhotonSource, RunSummary};
use sdapd::protocol::{self, ClampPolicy, OperatingPoint};
use sdapd::sdcore::{self, SdConfig};
use sdapd::signal::{self, GateConfig, Waveform};
use sdapd::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SdapdStatus {
    Ok = 0,
    NullPointer = 1,
    BufferTooSmall = 2,
    InvalidParameter = 3,
    Sampling = 4,
    TooShort = 5,
    OutOfRange = 6,
    Incompatible = 7,
    UndefinedEstimate = 8,
    AmbiguousPeak = 9,
    DivisorMismatch = 10,
    Config = 11,
    Io = 12,
    Panic = 13,
}

impl From<&Error> for SdapdStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::Sampling(_) => SdapdStatus::Sampling,
            Error::InvalidParameter { .. } => SdapdStatus::InvalidParameter,
            Error::TooShort(_) => SdapdStatus::TooShort,
            Error::OutOfRange { .. } => SdapdStatus::OutOfRange,
            Error::Incompatible(_) => SdapdStatus::Incompatible,
            Error::UndefinedEstimate(_) => SdapdStatus::UndefinedEstimate,
            Error::AmbiguousPeak { .. } => SdapdStatus::AmbiguousPeak,
            Error::DivisorMismatch { .. } => SdapdStatus::DivisorMismatch,
            Error::Config(_) | Error::UnknownExperiment(_) => SdapdStatus::Config,
            Error::Io { .. } => SdapdStatus::Io,
        }
    }
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

struct Fail(SdapdStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail((&e).into(), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(SdapdStatus::NullPointer, format!("`{what}` is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> SdapdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            SdapdStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            SdapdStatus::Panic
        }
    }
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call into this library on the
/// same thread.
#[no_mangle]
pub extern "C" fn sdapd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sdapd_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn inp<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// Copies `data` into a caller buffer, always reporting the full length.
unsafe fn fill<T: Copy>(
    data: &[T],
    buf: *mut T,
    cap: usize,
    len_out: *mut usize,
) -> Result<(), Fail> {
    *out(len_out, "len_out")? = data.len();
    if cap < data.len() || (buf.is_null() && !data.is_empty()) {
        return Err(Fail(
            SdapdStatus::BufferTooSmall,
            format!("buffer holds {cap}, need {}", data.len()),
        ));
    }
    ptr::copy_nonoverlapping(data.as_ptr(), buf, data.len());
    Ok(())
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdapdGate {
    pub frequency: f64,
    /// Peak-to-peak volts.
    pub amplitude: f64,
    pub dc_bias: f64,
    pub analog_bandwidth: f64,
}

impl From<SdapdGate> for GateConfig {
    fn from(g: SdapdGate) -> Self {
        GateConfig {
            frequency: g.frequency,
            amplitude: g.amplitude,
            dc_bias: g.dc_bias,
            analog_bandwidth: g.analog_bandwidth,
        }
    }
}

impl From<GateConfig> for SdapdGate {
    fn from(g: GateConfig) -> Self {
        SdapdGate {
            frequency: g.frequency,
            amplitude: g.amplitude,
            dc_bias: g.dc_bias,
            analog_bandwidth: g.analog_bandwidth,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdapdSource {
    pub wavelength: f64,
    pub pulse_rate: f64,
    pub mean_photons_per_pulse: f64,
    pub pulse_width: f64,
    pub delay: f64,
}

impl From<SdapdSource> for PhotonSource {
    fn from(s: SdapdSource) -> Self {
        PhotonSource {
            wavelength: s.wavelength,
            pulse_rate: s.pulse_rate,
            mean_photons_per_pulse: s.mean_photons_per_pulse,
            pulse_width: s.pulse_width,
            delay: s.delay,
        }
    }
}

impl From<PhotonSource> for SdapdSource {
    fn from(s: PhotonSource) -> Self {
        SdapdSource {
            wavelength: s.wavelength,
            pulse_rate: s.pulse_rate,
            mean_photons_per_pulse: s.mean_photons_per_pulse,
            pulse_width: s.pulse_width,
            delay: s.delay,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdapdSdConfig {
    pub delay_cycles: u32,
    pub nominal_delay: f64,
    pub stretcher_trim: f64,
    pub split_ratio: f64,
    pub interp_taps: u32,
}

impl From<SdapdSdConfig> for SdConfig {
    fn from(c: SdapdSdConfig) -> Self {
        SdConfig {
            delay_cycles: c.delay_cycles,
            nominal_delay: c.nominal_delay,
            stretcher_trim: c.stretcher_trim,
            split_ratio: c.split_ratio,
            interp_taps: c.interp_taps as usize,
        }
    }
}

impl From<SdConfig> for SdapdSdConfig {
    fn from(c: SdConfig) -> Self {
        SdapdSdConfig {
            delay_cycles: c.delay_cycles,
            nominal_delay: c.nominal_delay,
            stretcher_trim: c.stretcher_trim,
            split_ratio: c.split_ratio,
            interp_taps: c.interp_taps as u32,
        }
    }
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SdapdSuppression {
    pub harmonic_db: f64,
    pub harmonic_hz: f64,
    pub broadband_db: f64,
}

/// Undefined estimates are NaN.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SdapdCharacterization {
    pub raw_count_rate: f64,
    pub dark_prob: f64,
    pub afterpulse_prob: f64,
    pub net_efficiency: f64,
    pub charge_estimate: f64,
    pub gate_frequency: f64,
    pub photon_flux: f64,
    pub sigma_dark_prob: f64,
    pub sigma_afterpulse_prob: f64,
    pub sigma_net_efficiency: f64,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SdapdRunSummary {
    pub gates: u64,
    pub counts: u64,
    pub photon_counts: u64,
    pub dark_counts: u64,
    pub afterpulse_counts: u64,
    pub avalanches: u64,
    pub total_charge: f64,
    pub photocurrent: f64,
    pub count_rate: f64,
    pub sync_divisor: u64,
}

impl From<&RunSummary> for SdapdRunSummary {
    fn from(s: &RunSummary) -> Self {
        SdapdRunSummary {
            gates: s.gates,
            counts: s.counts,
            photon_counts: s.photon_counts,
            dark_counts: s.dark_counts,
            afterpulse_counts: s.afterpulse_counts,
            avalanches: s.avalanches,
            total_charge: s.total_charge,
            photocurrent: s.photocurrent,
            count_rate: s.count_rate(),
            sync_divisor: s.sync_divisor,
        }
    }
}

// ---------------------------------------------------------------- defaults

#[no_mangle]
pub extern "C" fn sdapd_gate_default() -> SdapdGate {
    GateConfig::default().into()
}

#[no_mangle]
pub extern "C" fn sdapd_source_default() -> SdapdSource {
    PhotonSource::default().into()
}

#[no_mangle]
pub extern "C" fn sdapd_sd_config_default() -> SdapdSdConfig {
    SdConfig::default().into()
}

// --------------------------------------------------------------- estimators

/// # Safety
/// `result` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn sdapd_power_to_flux(
    power: f64,
    wavelength: f64,
    result: *mut f64,
) -> SdapdStatus {
    guard(|| {
        *out(result, "result")? = protocol::power_to_flux(power, wavelength)?;
        Ok(())
    })
}

/// # Safety
/// `result` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn sdapd_eta_net(
    count_rate: f64,
    dark_prob: f64,
    afterpulse_prob: f64,
    flux: f64,
    frequency: f64,
    result: *mut f64,
) -> SdapdStatus {
    guard(|| {
        *out(result, "result")? =
            protocol::eta_net(count_rate, dark_prob, afterpulse_prob, flux, frequency)?;
        Ok(())
    })
}

/// # Safety
/// `result` must be a valid pointer to writable storage.
#[no_mangle]
pub unsafe extern "C" fn sdapd_estimate_charge(
    photocurrent: f64,
    count_rate: f64,
    result: *mut f64,
) -> SdapdStatus {
    guard(|| {
        *out(result, "result")? = protocol::estimate_charge(photocurrent, count_rate)?;
        Ok(())
    })
}

/// Afterpulse probability from a gate-position histogram and its laser-off
/// baseline. `total_clamp` selects clamping the summed excess instead of
/// each position.
///
/// # Safety
/// `histogram` and `dark` must each point to `len` readable values;
/// `probability` and `peak_position` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sdapd_extract_afterpulse(
    histogram: *const u64,
    dark: *const u64,
    len: usize,
    total_clamp: bool,
    probability: *mut f64,
    peak_position: *mut usize,
) -> SdapdStatus {
    guard(|| {
        let h = slice(histogram, len, "histogram")?;
        let d = slice(dark, len, "dark")?;
        let policy = if total_clamp {
            ClampPolicy::Total
        } else {
            ClampPolicy::PerBin
        };
        let est = protocol::extract_afterpulse_with(h, d, policy)?;
        *out(probability, "probability")? = est.probability;
        *out(peak_position, "peak_position")? = est.peak_position;
        Ok(())
    })
}

// ----------------------------------------------------------------- signals

/// Writes a band-limited gate train into `buf`.
///
/// # Safety
/// `gate` and `len_out` must be valid; `buf` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn sdapd_synth_gate_train(
    gate: *const SdapdGate,
    duration: f64,
    sample_rate: f64,
    buf: *mut f64,
    cap: usize,
    len_out: *mut usize,
) -> SdapdStatus {
    guard(|| {
        let g: GateConfig = (*inp(gate, "gate")?).into();
        let w = signal::synth_gate_train(&g, duration, sample_rate)?;
        fill(w.samples(), buf, cap, len_out)
    })
}

/// Runs samples through the self-differencing circuit. The output begins
/// after the warm-up span; its start time is written to `start_out`.
///
/// # Safety
/// `samples` must hold `len` values, `buf` `cap` values; `cfg`, `len_out`
/// and `start_out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sdapd_apply_sd(
    samples: *const f64,
    len: usize,
    sample_rate: f64,
    start_time: f64,
    cfg: *const SdapdSdConfig,
    buf: *mut f64,
    cap: usize,
    len_out: *mut usize,
    start_out: *mut f64,
) -> SdapdStatus {
    guard(|| {
        let x = slice(samples, len, "samples")?;
        let c: SdConfig = (*inp(cfg, "cfg")?).into();
        let w = Waveform::new(sample_rate, start_time, x.to_vec())?;
        let y = sdcore::apply_sd(&w, &c)?;
        *out(start_out, "start_out")? = y.start_time();
        fill(y.samples(), buf, cap, len_out)
    })
}

/// # Safety
/// `cfg` and `tuned` must be valid pointers; they may alias.
#[no_mangle]
pub unsafe extern "C" fn sdapd_tune_to_frequency(
    target: f64,
    cfg: *const SdapdSdConfig,
    tuned: *mut SdapdSdConfig,
) -> SdapdStatus {
    guard(|| {
        let c: SdConfig = (*inp(cfg, "cfg")?).into();
        let t = sdcore::tune_to_frequency(target, &c)?;
        *out(tuned, "tuned")? = t.into();
        Ok(())
    })
}

/// # Safety
/// `input` must hold `input_len` values and `output` `output_len` values,
/// both sampled at `sample_rate`; `report` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sdapd_measure_suppression(
    input: *const f64,
    input_len: usize,
    input_start: f64,
    output: *const f64,
    output_len: usize,
    output_start: f64,
    sample_rate: f64,
    at: f64,
    report: *mut SdapdSuppression,
) -> SdapdStatus {
    guard(|| {
        let a = Waveform::new(
            sample_rate,
            input_start,
            slice(input, input_len, "input")?.to_vec(),
        )?;
        let b = Waveform::new(
            sample_rate,
            output_start,
            slice(output, output_len, "output")?.to_vec(),
        )?;
        let r = sdcore::measure_suppression(&a, &b, at)?;
        *out(report, "report")? = SdapdSuppression {
            harmonic_db: r.harmonic_suppression_db,
            harmonic_hz: r.harmonic_hz,
            broadband_db: r.broadband_cancellation_db,
        };
        Ok(())
    })
}

// ----------------------------------------------------------------- detector

/// Opaque detector model.
pub struct SdapdDetector {
    params: DetectorParams,
}

/// New detector with defaults for `gate_frequency` (sets the jitter).
///
/// # Safety
/// `handle` must be a valid pointer; the result is freed with
/// [`sdapd_detector_free`].
#[no_mangle]
pub unsafe extern "C" fn sdapd_detector_new(
    gate_frequency: f64,
    handle: *mut *mut SdapdDetector,
) -> SdapdStatus {
    guard(|| {
        let h = out(handle, "handle")?;
        *h = ptr::null_mut();
        let params = DetectorParams::for_gate_frequency(gate_frequency);
        params.validate()?;
        *h = Box::into_raw(Box::new(SdapdDetector { params }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`sdapd_detector_new`] and not be used after.
#[no_mangle]
pub unsafe extern "C" fn sdapd_detector_free(handle: *mut SdapdDetector) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

fn name_of(name: *const c_char) -> Result<String, Fail> {
    if name.is_null() {
        return Err(null("name"));
    }
    // SAFETY: caller passes a NUL-terminated string
    let s = unsafe { CStr::from_ptr(name) };
    s.to_str()
        .map(str::to_owned)
        .map_err(|_| Fail(SdapdStatus::InvalidParameter, "name is not UTF-8".into()))
}

fn unknown(name: &str) -> Fail {
    Fail(
        SdapdStatus::InvalidParameter,
        format!("unknown detector parameter `{name}`"),
    )
}

/// Sets a numeric detector parameter by field name, e.g. `"eta_max"`.
/// Boolean fields take 0 or 1.
///
/// # Safety
/// `handle` must be live and `name` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn sdapd_detector_set(
    handle: *mut SdapdDetector,
    name: *const c_char,
    value: f64,
) -> SdapdStatus {
    guard(|| {
        let d = out(handle, "handle")?;
        let key = name_of(name)?;
        let mut v =
            serde_json::to_value(d.params).map_err(|e| Fail(SdapdStatus::Config, e.to_string()))?;
        let slot = v.get_mut(&key).ok_or_else(|| unknown(&key))?;
        *slot = if slot.is_boolean() {
            serde_json::Value::Bool(value != 0.0)
        } else {
            serde_json::json!(value)
        };
        let params: DetectorParams = serde_json::from_value(v)
            .map_err(|e| Fail(SdapdStatus::InvalidParameter, e.to_string()))?;
        params.validate()?;
        d.params = params;
        Ok(())
    })
}

/// # Safety
/// `handle` must be live, `name` NUL-terminated and `value` writable.
#[no_mangle]
pub unsafe extern "C" fn sdapd_detector_get(
    handle: *const SdapdDetector,
    name: *const c_char,
    value: *mut f64,
) -> SdapdStatus {
    guard(|| {
        let d = inp(handle, "handle")?;
        let key = name_of(name)?;
        let v =
            serde_json::to_value(d.params).map_err(|e| Fail(SdapdStatus::Config, e.to_string()))?;
        let field = v.get(&key).ok_or_else(|| unknown(&key))?;
        *out(value, "value")? = match field {
            serde_json::Value::Bool(b) => f64::from(u8::from(*b)),
            other => other.as_f64().ok_or_else(|| unknown(&key))?,
        };
        Ok(())
    })
}

/// Adjusts the detector so that at `gate.dc_bias` with `source` its expected
/// net efficiency, afterpulse and dark count probabilities are the targets.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn sdapd_detector_plant(
    handle: *mut SdapdDetector,
    gate: *const SdapdGate,
    source: *const SdapdSource,
    net_efficiency: f64,
    afterpulse_prob: f64,
    dark_prob: f64,
) -> SdapdStatus {
    guard(|| {
        let d = out(handle, "handle")?;
        let g: GateConfig = (*inp(gate, "gate")?).into();
        let s: PhotonSource = (*inp(source, "source")?).into();
        let target = OperatingPoint {
            gate_frequency: g.frequency,
            net_efficiency,
            afterpulse_prob,
            dark_prob,
        };
        d.params = protocol::plant_operating_point(&d.params, &s, &g, &target)?;
        Ok(())
    })
}

// --------------------------------------------------------------- simulation

/// Opaque simulation: a detector, gate and source plus the last run.
pub struct SdapdSimulation {
    params: DetectorParams,
    gate: GateConfig,
    source: PhotonSource,
    last: Option<RunSummary>,
}

/// Snapshots the detector; later changes to it do not affect the simulation.
///
/// # Safety
/// `detector`, `gate`, `source` and `handle` must be valid. Free the result
/// with [`sdapd_simulation_free`].
#[no_mangle]
pub unsafe extern "C" fn sdapd_simulation_new(
    detector: *const SdapdDetector,
    gate: *const SdapdGate,
    source: *const SdapdSource,
    handle: *mut *mut SdapdSimulation,
) -> SdapdStatus {
    guard(|| {
        let h = out(handle, "handle")?;
        *h = ptr::null_mut();
        let params = inp(detector, "detector")?.params;
        let gate: GateConfig = (*inp(gate, "gate")?).into();
        let source: PhotonSource = (*inp(source, "source")?).into();
        gate.validate()?;
        source.validate()?;
        source.sync_divisor(gate.frequency)?;
        *h = Box::into_raw(Box::new(SdapdSimulation {
            params,
            gate,
            source,
            last: None,
        }));
        Ok(())
    })
}

/// # Safety
/// `handle` must come from [`sdapd_simulation_new`] and not be used after.
#[no_mangle]
pub unsafe extern "C" fn sdapd_simulation_free(handle: *mut SdapdSimulation) {
    if !handle.is_null() {
        drop(Box::from_raw(handle));
    }
}

/// Simulates `n_gates` gates; the summary is kept for
/// [`sdapd_simulation_histogram`].
///
/// # Safety
/// `handle` must be live; `summary` may be null.
#[no_mangle]
pub unsafe extern "C" fn sdapd_simulation_run(
    handle: *mut SdapdSimulation,
    n_gates: u64,
    seed: u64,
    summary: *mut SdapdRunSummary,
) -> SdapdStatus {
    guard(|| {
        let sim = out(handle, "handle")?;
        let (_, s) = simulate_gates(&sim.params, &sim.source, &sim.gate, n_gates, seed)?;
        if let Some(dst) = summary.as_mut() {
            *dst = (&s).into();
        }
        sim.last = Some(s);
        Ok(())
    })
}

/// Counts per gate position modulo the sync divisor from the last run.
///
/// # Safety
/// `handle` and `len_out` must be valid; `buf` must hold `cap` values.
#[no_mangle]
pub unsafe extern "C" fn sdapd_simulation_histogram(
    handle: *const SdapdSimulation,
    buf: *mut u64,
    cap: usize,
    len_out: *mut usize,
) -> SdapdStatus {
    guard(|| {
        let sim = inp(handle, "handle")?;
        let last = sim.last.as_ref().ok_or_else(|| {
            Fail(
                SdapdStatus::UndefinedEstimate,
                "simulation has not been run".into(),
            )
        })?;
        fill(&last.histogram, buf, cap, len_out)
    })
}

/// Laser-off and illuminated runs of `n_gates` each, reduced to the
/// characterization tuple.
///
/// # Safety
/// `handle` and `result` must be valid.
#[no_mangle]
pub unsafe extern "C" fn sdapd_simulation_characterize(
    handle: *const SdapdSimulation,
    n_gates: u64,
    seed: u64,
    total_clamp: bool,
    result: *mut SdapdCharacterization,
) -> SdapdStatus {
    guard(|| {
        let sim = inp(handle, "handle")?;
        let policy = if total_clamp {
            ClampPolicy::Total
        } else {
            ClampPolicy::PerBin
        };
        let c = protocol::characterize(&sim.params, &sim.source, &sim.gate, n_gates, seed, policy)?;
        let r = c.result;
        *out(result, "result")? = SdapdCharacterization {
            raw_count_rate: r.raw_count_rate,
            dark_prob: r.dark_prob,
            afterpulse_prob: r.afterpulse_prob.unwrap_or(f64::NAN),
            net_efficiency: r.net_efficiency,
            charge_estimate: r.charge_estimate.unwrap_or(f64::NAN),
            gate_frequency: r.gate_frequency,
            photon_flux: r.photon_flux,
            sigma_dark_prob: c.sigma.dark_prob,
            sigma_afterpulse_prob: c.sigma.afterpulse_prob.unwrap_or(f64::NAN),
            sigma_net_efficiency: c.sigma.net_efficiency,
        };
        Ok(())
    })
}
