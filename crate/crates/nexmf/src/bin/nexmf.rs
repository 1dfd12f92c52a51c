//! Command-line front end for the experiment harness.
//!
//! Exit codes: 0 when every assertion passes, 1 when the run completes but
//! an assertion fails, 2 for config, usage, or numerical errors.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use nexmf::experiment::{run_experiment, run_sweep, Artifacts, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "nexmf",
    about = "Mean-field experiment runner: scenarios, sweeps, CSV/JSON/SVG reports",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Path to the experiment config (a single JSON document).
    config: PathBuf,

    /// Output directory; overrides `out_dir` from the config.
    #[arg(long)]
    out: Option<PathBuf>,

    /// Size of the worker thread pool (default: all cores).
    #[arg(long)]
    threads: Option<usize>,

    /// Print per-step progress to stderr.
    #[arg(long)]
    verbose: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured scenario once.
    Run {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Run the scenario once per parameter value and chart the trend.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,

        /// Which config entry to vary: N, G (grid_size), or tree_cap.
        #[arg(long)]
        param: String,

        /// Comma-separated parameter values, e.g. 50,100,200,400.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<u64>,
    },
}

fn load_config(common: &CommonArgs) -> Result<ExperimentConfig, String> {
    let text = std::fs::read_to_string(&common.config)
        .map_err(|e| format!("cannot read {}: {e}", common.config.display()))?;
    ExperimentConfig::from_json(&text).map_err(|e| e.to_string())
}

fn configure_threads(threads: Option<usize>) -> Result<(), String> {
    if let Some(k) = threads {
        if k == 0 {
            return Err("--threads must be at least 1".into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(k)
            .build_global()
            .map_err(|e| format!("thread pool setup failed: {e}"))?;
    }
    Ok(())
}

fn report(artifacts: &Artifacts) -> ExitCode {
    if artifacts.passed {
        println!(
            "ok: {} rows, all assertions passed ({})",
            artifacts.rows,
            artifacts.out_dir.display()
        );
        ExitCode::SUCCESS
    } else {
        println!(
            "FAILED: {} ({} rows, {})",
            artifacts.failed_assertions.join(", "),
            artifacts.rows,
            artifacts.out_dir.display()
        );
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run { common } => {
            if let Err(msg) = configure_threads(common.threads) {
                eprintln!("error: {msg}");
                return ExitCode::from(2);
            }
            load_config(common).and_then(|cfg| {
                run_experiment(&cfg, common.out.as_deref(), common.verbose)
                    .map_err(|e| e.to_string())
            })
        }
        Command::Sweep {
            common,
            param,
            values,
        } => {
            if let Err(msg) = configure_threads(common.threads) {
                eprintln!("error: {msg}");
                return ExitCode::from(2);
            }
            load_config(common).and_then(|cfg| {
                run_sweep(&cfg, param, values, common.out.as_deref(), common.verbose)
                    .map_err(|e| e.to_string())
            })
        }
    };

    match outcome {
        Ok(artifacts) => report(&artifacts),
        Err(msg) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
