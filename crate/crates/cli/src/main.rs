//! Experiment harness CLI: validate configs, inspect derived seeds, run
//! experiments, and evaluate explicit policy vectors.
//!
//! On failure a machine-readable error record is printed to stderr and the
//! exit code is nonzero.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use revjump_core::experiment::{
    evaluate_theta, load_config, run_experiment, run_seeds, validate_config,
};

#[derive(Parser)]
#[command(name = "revjump", version, about = "Policy search by trans-dimensional MCMC")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every method x run cell of an experiment config.
    Run {
        config: PathBuf,
        /// Parallel runs (defaults to the number of cores).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Check a config without running anything.
    Validate { config: PathBuf },
    /// Print the derived per-run seeds.
    Seeds { config: PathBuf },
    /// Evaluate an explicit parameter vector (JSON array file) under the
    /// config's environment and evaluation settings.
    Eval {
        config: PathBuf,
        #[arg(long)]
        theta: PathBuf,
    },
}

#[derive(Serialize)]
struct ErrorRecord {
    error: String,
    kind: &'static str,
}

fn error_kind(err: &revjump_core::Error) -> &'static str {
    use revjump_core::Error::*;
    match err {
        Config(_) => "config",
        Dimension(_) => "dimension",
        IndexOutOfRange(_) => "index",
        EmptyInput(_) => "empty_input",
        NonFinite { .. } => "non_finite",
        Io(_) => "io",
        Parse(_) => "parse",
        Json(_) => "json",
    }
}

fn execute(command: Command) -> revjump_core::Result<()> {
    match command {
        Command::Run { config, jobs } => {
            let config = load_config(&config)?;
            let report = run_experiment(&config, jobs)?;
            let failed = report.runs.iter().filter(|r| !r.ok).count();
            for agg in &report.aggregates {
                println!(
                    "{}: mean J = {:.6} (std {:.6}) over {} runs",
                    agg.method, agg.j_mean_mean, agg.j_mean_std, agg.runs_ok
                );
            }
            println!(
                "wrote {} (runs: {}, failed: {})",
                config.output_dir.join("summary.json").display(),
                report.runs.len(),
                failed
            );
            if failed > 0 {
                return Err(revjump_core::Error::Config(format!(
                    "{} run(s) failed; see summary.json",
                    failed
                )));
            }
            Ok(())
        }
        Command::Validate { config } => {
            let parsed = load_config(&config)?;
            validate_config(&parsed)?;
            println!("ok: {}", config.display());
            Ok(())
        }
        Command::Seeds { config } => {
            let parsed = load_config(&config)?;
            validate_config(&parsed)?;
            for (method, run, seed) in run_seeds(&parsed) {
                println!("{}\trun_{}\t{}", method, run, seed);
            }
            Ok(())
        }
        Command::Eval { config, theta } => {
            let parsed = load_config(&config)?;
            validate_config(&parsed)?;
            let text = std::fs::read_to_string(&theta)?;
            let values: Vec<f64> = serde_json::from_str(&text)?;
            let (mean, std_err) = evaluate_theta(&parsed, &values)?;
            println!(
                "{}",
                serde_json::json!({ "j_mean": mean, "j_std_err": std_err })
            );
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let record = ErrorRecord {
                error: err.to_string(),
                kind: error_kind(&err),
            };
            eprintln!(
                "{}",
                serde_json::to_string(&record)
                    .unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", err))
            );
            ExitCode::FAILURE
        }
    }
}
