//! `bpre <experiment> --config <file.json> --seed <u64> --out <dir> [--threads k] [--svg]`

use std::path::PathBuf;
use std::process::ExitCode;

use bpre::experiment::{run_experiment, ExperimentConfig, EXPERIMENTS};
use clap::Parser;

#[derive(Debug, Parser)]
#[command(name = "bpre", version, about = "Run a named branching-process experiment and write its report")]
struct Args {
    /// One of: survival-asymptotics, theta-consistency, growth-law,
    /// tau-min-limit, walk-limit, renewal, validate.
    experiment: String,
    /// JSON config (model and sizes); command-line flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base seed for all random streams (required here or in the config).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long)]
    threads: Option<usize>,
    /// Also write SVG plots.
    #[arg(long)]
    svg: bool,
}

fn run(args: Args) -> Result<bool, String> {
    if !EXPERIMENTS.contains(&args.experiment.as_str()) {
        return Err(format!("unknown experiment '{}'; expected one of {}", args.experiment, EXPERIMENTS.join(", ")));
    }
    let mut config = match &args.config {
        Some(path) => ExperimentConfig::from_file(path).map_err(|e| e.to_string())?,
        None => ExperimentConfig::from_json("{}").map_err(|e| e.to_string())?,
    };
    config.experiment = args.experiment;
    config.seed = args.seed.or(config.seed);
    config.out = args.out.or(config.out);
    config.svg |= args.svg;
    if let Some(k) = args.threads {
        if k == 0 {
            return Err("--threads must be at least 1".into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(k).build_global().map_err(|e| e.to_string())?;
    }
    let manifest = run_experiment(&config).map_err(|e| e.to_string())?;
    for v in &manifest.verdicts {
        println!(
            "{} {}: measured {} (threshold {}) {}",
            if v.passed { "PASS" } else { "FAIL" },
            v.name,
            num(v.measured),
            num(v.threshold),
            v.detail
        );
    }
    println!(
        "{} files written to {} in {:.1} s",
        manifest.files.len() + 1,
        config.out.as_ref().expect("validated").display(),
        manifest.wall_time_s
    );
    Ok(manifest.passed)
}

fn num(x: f64) -> String {
    if x != 0.0 && x.is_finite() && (x.abs() < 1e-3 || x.abs() >= 1e6) {
        format!("{x:.4e}")
    } else {
        format!("{:.6}", x).trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

fn main() -> ExitCode {
    match run(Args::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
