use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sdapd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sdapd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

fn error_json(out: &Output) -> Value {
    serde_json::from_slice(&out.stderr).expect("stderr carries a JSON error record")
}

const TABLE_POINT: &str = r#"
experiment = "characterize"
seed = 2024
n_gates = 20_000_000
gate.frequency = 2e9
gate.dc_bias = 41.0
source.pulse_rate = 31.25e6
source.mean_photons_per_pulse = 0.032
plant.gate_frequency = 2e9
plant.net_efficiency = 0.235
plant.afterpulse_prob = 0.0484
plant.dark_prob = 1.32e-5
"#;

const SWEEP: &str = r#"
experiment = "bias-sweep"
seed = 5
n_gates = 1_000_000
source.mean_photons_per_pulse = 0.5
sweep.biases = [40.2, 40.7, 41.2, 41.7, 42.2, 42.7]
"#;

#[test]
fn characterize_recovers_table_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", TABLE_POINT);
    let out = dir.path().join("out");
    let run = sdapd(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    let result: Value =
        serde_json::from_str(&fs::read_to_string(out.join("characterization.json")).unwrap())
            .unwrap();
    let keys: Vec<&str> = result
        .as_object()
        .unwrap()
        .keys()
        .map(|k| k.as_str())
        .collect();
    for k in [
        "raw_count_rate",
        "dark_prob",
        "afterpulse_prob",
        "net_efficiency",
        "charge_estimate",
        "gate_frequency",
        "photon_flux",
    ] {
        assert!(keys.contains(&k), "missing {k}");
    }
    assert_eq!(keys.len(), 7);
    let detail: Value = serde_json::from_str(
        &fs::read_to_string(out.join("characterization_detail.json")).unwrap(),
    )
    .unwrap();
    let eta = result["net_efficiency"].as_f64().unwrap();
    let sigma = detail["sigma"]["net_efficiency"].as_f64().unwrap();
    assert!((eta - 0.235).abs() < 3.0 * sigma, "{eta} +- {sigma}");
    assert_eq!(result["photon_flux"].as_f64().unwrap(), 1.0e6);
}

#[test]
fn zero_gates_fails_validation_before_running() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "c.toml",
        "experiment = \"characterize\"\nseed = 1\nn_gates = 0\n",
    );
    let out = dir.path().join("out");
    let run = sdapd(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(run.status.code(), Some(2));
    let err = error_json(&run);
    assert_eq!(err["kind"], "invalid_parameter");
    assert_eq!(err["exit_code"], 2);
    assert!(
        !out.exists(),
        "nothing may be written on validation failure"
    );
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let run = sdapd(&["--experiment", "fig5", "--seed", "1", "--out", out]);
    assert_eq!(run.status.code(), Some(2));
    assert_eq!(error_json(&run)["kind"], "unknown_experiment");

    let run = sdapd(&["--experiment", "delay-scan", "--out", out]);
    assert_eq!(run.status.code(), Some(2));
    assert_eq!(error_json(&run)["kind"], "config");

    let cfg = write(dir.path(), "typo.toml", "detector.eta_mx = 0.2\n");
    let run = sdapd(&[
        "--config",
        &cfg,
        "--experiment",
        "characterize",
        "--seed",
        "1",
        "--out",
        out,
    ]);
    assert_eq!(run.status.code(), Some(2));
    assert!(error_json(&run)["message"]
        .as_str()
        .unwrap()
        .contains("eta_mx"));

    let cfg = write(dir.path(), "div.toml", "source.pulse_rate = 0.3e9\n");
    let run = sdapd(&[
        "--config",
        &cfg,
        "--experiment",
        "characterize",
        "--seed",
        "1",
        "--out",
        out,
    ]);
    assert_eq!(error_json(&run)["kind"], "divisor_mismatch");
}

#[test]
fn unwritable_output_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = write(dir.path(), "file", "");
    let cfg = write(dir.path(), "s.toml", SWEEP);
    let run = sdapd(&["--config", &cfg, "--out", &format!("{blocker}/sub")]);
    assert_eq!(run.status.code(), Some(3));
    assert_eq!(error_json(&run)["kind"], "io");
}

fn run_to(cfg: &str, out: &Path, threads: &str) -> Value {
    let run = sdapd(&[
        "--config",
        cfg,
        "--out",
        out.to_str().unwrap(),
        "--threads",
        threads,
    ]);
    assert!(
        run.status.success(),
        "{}",
        String::from_utf8_lossy(&run.stderr)
    );
    serde_json::from_slice(&run.stdout).unwrap()
}

fn same_files(a: &Path, b: &Path, names: &[&str]) {
    for name in names {
        let x = fs::read(a.join(name)).unwrap();
        let y = fs::read(b.join(name)).unwrap();
        assert!(x == y, "{name} differs");
    }
}

#[test]
fn repeated_runs_are_byte_identical_for_any_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "s.toml", SWEEP);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    run_to(&cfg, &a, "1");
    run_to(&cfg, &b, "3");
    same_files(
        &a,
        &b,
        &["bias_sweep.csv", "bias_sweep.json", "manifest.json"],
    );
    let csv = fs::read_to_string(a.join("bias_sweep.csv")).unwrap();
    assert!(csv.starts_with("bias_v,count_rate_hz,p_d_per_gate,p_a,eta_net,q_c\n"));
    assert_eq!(csv.lines().count(), 7);
}

#[test]
fn manifest_replays_every_output() {
    let dir = tempfile::tempdir().unwrap();
    let scan = "experiment = \"delay-scan\"\nseed = 8\nn_gates = 200_000\ngate.frequency = 1e9\n\
                source.pulse_rate = 1e9\nsource.mean_photons_per_pulse = 0.023\nscan.stop = 1.2e-9\n";
    for (name, text) in [
        ("scan.toml", scan),
        ("sweep.toml", SWEEP),
        ("point.toml", TABLE_POINT),
    ] {
        let cfg = write(dir.path(), name, text);
        let first = dir.path().join(format!("{name}.1"));
        let summary = run_to(&cfg, &first, "2");
        let manifest = first.join("manifest.json");
        let second = dir.path().join(format!("{name}.2"));
        run_to(manifest.to_str().unwrap(), &second, "1");
        let files: Vec<String> = summary["files"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap().to_string())
            .collect();
        let listed: Value = serde_json::from_str(&fs::read_to_string(&manifest).unwrap()).unwrap();
        assert_eq!(listed["files"].as_array().unwrap().len(), files.len());
        for f in &files {
            assert!(first.join(f).exists(), "{f} listed but missing");
        }
        let names: Vec<&str> = files.iter().map(|s| s.as_str()).collect();
        same_files(&first, &second, &names);
    }
}

#[test]
fn waveform_demo_writes_traces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "w.toml", "experiment = \"waveform-demo\"\nseed = 1\ngate.frequency = 3e9\nwaveform.noise_rms = 0.001\n");
    let out = dir.path().join("w");
    run_to(&cfg, &out, "1");
    let trace = fs::read_to_string(out.join("waveform_output.csv")).unwrap();
    assert!(trace.starts_with("t_s,v_volts\n"));
    let report: Value =
        serde_json::from_str(&fs::read_to_string(out.join("suppression.json")).unwrap()).unwrap();
    assert!(report["broadband_db"].as_f64().unwrap() > 60.0);
    assert_eq!(report["harmonic_hz"].as_f64().unwrap(), 3e9);
}
