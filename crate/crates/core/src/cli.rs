//! Experiment runner behind the `sdapd` binary.
//!
//! Each experiment writes its CSV/JSON outputs plus `manifest.json` into the
//! output directory. The manifest holds the resolved config, so passing it
//! back as `--config` reproduces every file byte for byte.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};

use crate::apdsim::{simulate_gates, write_events_csv, DetectorParams};
use crate::config::{Experiment, RunConfig};
use crate::error::{Error, Result};
use crate::protocol::{
    afterpulse_charge_fit, bias_sweep, characterize, plant_operating_point, run_delay_scan,
    saturation_bias, write_bias_sweep_csv, write_delay_scan_csv, Characterization,
};
use crate::rng::derive_seed;
use crate::sdcore::{
    apply_sd, measure_suppression, tune_to_frequency, SdConfig, MAX_STRETCHER_TRIM,
};
use crate::signal::{
    add_noise, capacitive_feedthrough, inject_avalanche, synth_gate_train, Waveform,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;

pub fn exit_code(err: &Error) -> i32 {
    if err.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Machine-readable record of a failed run.
pub fn error_record(err: &Error) -> Value {
    json!({
        "status": "error",
        "kind": err.kind(),
        "message": err.to_string(),
        "exit_code": exit_code(err),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub experiment: Experiment,
    pub seed: u64,
    pub config: RunConfig,
    pub files: Vec<String>,
    /// Values computed from the config that downstream tools need, such as
    /// the saturation bias splitting a charge sweep.
    pub derived: Value,
}

struct Outputs {
    dir: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
        })
    }

    fn write(
        &mut self,
        name: &str,
        f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
    ) -> Result<()> {
        let path = self.dir.join(name);
        let file = File::create(&path).map_err(|e| io_err(&path, e))?;
        let mut w = BufWriter::new(file);
        f(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| io_err(&path, e))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        self.write(name, |w| {
            serde_json::to_writer_pretty(&mut *w, value)?;
            writeln!(w)
        })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Validates `cfg`, runs its experiment and writes all outputs to `out`.
pub fn run(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let experiment = cfg.experiment()?;
    let seed = cfg.seed()?;
    let mut outputs = Outputs::create(out)?;
    let derived = match experiment {
        Experiment::WaveformDemo => waveform_demo(cfg, seed, &mut outputs, true)?,
        Experiment::SdCancel => waveform_demo(cfg, seed, &mut outputs, false)?,
        Experiment::DelayScan => delay_scan(cfg, seed, &mut outputs)?,
        Experiment::Characterize => characterize_point(cfg, seed, &mut outputs)?,
        Experiment::BiasSweep => sweep(cfg, seed, &mut outputs, false)?,
        Experiment::AfterpulseCharge => sweep(cfg, seed, &mut outputs, true)?,
    };
    let mut manifest = Manifest {
        experiment,
        seed,
        config: cfg.clone(),
        files: outputs.files.clone(),
        derived,
    };
    manifest.files.push("manifest.json".into());
    outputs.json("manifest.json", &manifest)?;
    Ok(manifest)
}

fn detector(cfg: &RunConfig) -> Result<DetectorParams> {
    match &cfg.plant {
        Some(point) => plant_operating_point(&cfg.detector, &cfg.source, &cfg.gate, point),
        None => Ok(cfg.detector),
    }
}

/// Feed-through of a gate train, cut from a longer synthesis so that the
/// one-sided derivative at the ends does not enter the trace.
fn periodic_feedthrough(cfg: &RunConfig) -> Result<Waveform> {
    let w = &cfg.waveform;
    let period = cfg.gate.period();
    let train = synth_gate_train(&cfg.gate, (w.periods + 2) as f64 * period, w.sample_rate)?;
    let ft = capacitive_feedthrough(&train, w.coupling)?;
    let n = (w.periods as f64 * period * w.sample_rate).round() as usize;
    let first = (period * w.sample_rate).round() as usize;
    ft.window(ft.time(first), n)
}

fn waveform_demo(
    cfg: &RunConfig,
    seed: u64,
    out: &mut Outputs,
    with_avalanche: bool,
) -> Result<Value> {
    let w = &cfg.waveform;
    let sd: SdConfig = if w.tune {
        // whole gate periods closest to the middle of the stretcher range
        let mid = cfg.sd.nominal_delay + 0.5 * MAX_STRETCHER_TRIM;
        let cycles = ((cfg.gate.frequency * mid).round() as u32).max(1);
        let line = SdConfig {
            delay_cycles: cycles,
            ..cfg.sd
        };
        tune_to_frequency(cfg.gate.frequency, &line)?
    } else {
        cfg.sd
    };
    let feed = periodic_feedthrough(cfg)?;
    let feed_out = apply_sd(&feed, &sd)?;
    let report = measure_suppression(&feed, &feed_out, cfg.gate.frequency)?;

    let mut signal = feed.clone();
    if with_avalanche && w.avalanche_charge > 0.0 {
        let t = feed.start_time() + w.avalanche_period * cfg.gate.period();
        signal = inject_avalanche(&signal, t, w.avalanche_charge, &cfg.pulse)?;
    }
    if w.noise_rms > 0.0 {
        signal = add_noise(&signal, w.noise_rms, derive_seed(seed, 0))?;
    }
    let sd_out = apply_sd(&signal, &sd)?;
    let prefix = if with_avalanche { "waveform" } else { "sd" };
    out.write(&format!("{prefix}_input.csv"), |f| signal.write_csv(f))?;
    out.write(&format!("{prefix}_output.csv"), |f| sd_out.write_csv(f))?;
    out.json(
        "suppression.json",
        &json!({
            "harmonic_db": report.harmonic_suppression_db,
            "harmonic_hz": report.harmonic_hz,
            "broadband_db": report.broadband_cancellation_db,
            "effective_delay_s": sd.effective_delay(),
            "stretcher_trim_s": sd.stretcher_trim,
            "split_ratio": sd.split_ratio,
        }),
    )?;
    Ok(json!({ "effective_delay_s": sd.effective_delay() }))
}

fn delay_scan(cfg: &RunConfig, seed: u64, out: &mut Outputs) -> Result<Value> {
    let params = detector(cfg)?;
    let scan = run_delay_scan(
        &params,
        &cfg.source,
        &cfg.gate,
        &cfg.scan.grid(),
        cfg.n_gates,
        seed,
    )?;
    out.write("delay_scan.csv", |f| write_delay_scan_csv(&scan, f))?;
    let noise: Vec<f64> = scan
        .inter_peak_points()
        .iter()
        .map(|p| p.count_rate)
        .collect();
    out.json(
        "delay_scan.json",
        &json!({
            "gate_frequency": scan.gate_frequency,
            "gates_per_point": scan.gates_per_point,
            "grid_step": scan.grid_step,
            "peaks": scan.peaks,
            "mean_peak_spacing": scan.mean_peak_spacing,
            "mean_fwhm": scan.mean_fwhm,
            "dark_count_rate": scan.dark_count_rate,
            "inter_peak_count_rates": noise,
        }),
    )?;
    Ok(json!({ "detector": params }))
}

fn characterize_point(cfg: &RunConfig, seed: u64, out: &mut Outputs) -> Result<Value> {
    let params = detector(cfg)?;
    let c = characterize(
        &params,
        &cfg.source,
        &cfg.gate,
        cfg.n_gates,
        seed,
        cfg.clamp,
    )?;
    out.json("characterization.json", &c.result)?;
    out.json("characterization_detail.json", &detail(&c))?;
    if cfg.events {
        // same substream as the illuminated characterization run
        let (events, _) = simulate_gates(
            &params,
            &cfg.source,
            &cfg.gate,
            cfg.n_gates,
            derive_seed(seed, 1),
        )?;
        out.write("events.csv", |f| write_events_csv(&events, f))?;
    }
    Ok(json!({ "detector": params }))
}

fn detail(c: &Characterization) -> Value {
    json!({
        "bias": c.bias,
        "result": c.result,
        "sigma": c.sigma,
        "peak_position": c.peak_position,
        "true_mean_registered_charge": c.true_mean_registered_charge,
        "dark_histogram": c.dark.histogram,
        "illuminated_histogram": c.illuminated.histogram,
    })
}

fn sweep(cfg: &RunConfig, seed: u64, out: &mut Outputs, fit: bool) -> Result<Value> {
    let params = detector(cfg)?;
    let biases = cfg.sweep.grid();
    let rows = bias_sweep(
        &params,
        &cfg.source,
        &cfg.gate,
        &biases,
        cfg.n_gates,
        seed,
        cfg.clamp,
    )?;
    out.write("bias_sweep.csv", |f| write_bias_sweep_csv(&rows, f))?;
    let details: Vec<Value> = rows.iter().map(detail).collect();
    out.json("bias_sweep.json", &details)?;
    let split = saturation_bias(&params);
    if fit {
        let line = afterpulse_charge_fit(&rows, split);
        let low: Vec<Value> = rows
            .iter()
            .filter(|r| r.bias < split)
            .map(|r| {
                json!({
                    "bias": r.bias,
                    "charge_estimate": r.result.charge_estimate,
                    "true_mean_registered_charge": r.true_mean_registered_charge,
                })
            })
            .collect();
        out.json(
            "afterpulse_charge.json",
            &json!({ "saturation_bias": split, "fit": line, "below_saturation": low }),
        )?;
    }
    Ok(json!({ "detector": params, "saturation_bias": split }))
}
