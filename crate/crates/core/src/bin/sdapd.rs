use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use sdapd::cli::{error_record, exit_code, run};
use sdapd::config::{Experiment, RunConfig};
use sdapd::{Error, Result};
use serde_json::json;

/// Gated avalanche photodiode simulator with a self-differencing front end.
#[derive(Parser, Debug)]
#[command(name = "sdapd", version)]
struct Args {
    /// TOML config, or a manifest.json from a previous run.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    threads: Option<usize>,
    /// Experiment to run; overrides the config.
    #[arg(long)]
    experiment: Option<String>,
}

fn execute(args: &Args) -> Result<serde_json::Value> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(name) = &args.experiment {
        cfg.experiment = Some(name.parse::<Experiment>()?);
    }
    if let Some(seed) = args.seed {
        cfg.seed = Some(seed);
    }
    let pool = match args.threads {
        Some(0) => return Err(Error::Config("--threads must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build(),
        None => rayon::ThreadPoolBuilder::new().build(),
    }
    .map_err(|e| Error::Config(e.to_string()))?;
    let manifest = pool.install(|| run(&cfg, &args.out))?;
    Ok(json!({
        "status": "ok",
        "experiment": manifest.experiment,
        "out": args.out.display().to_string(),
        "files": manifest.files,
    }))
}

fn main() -> ExitCode {
    let args = Args::parse();
    match execute(&args) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("{}", error_record(&err));
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
