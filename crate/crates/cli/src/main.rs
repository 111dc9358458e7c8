//! `relnav` — simulate, train, filter, and evaluate object-relative
//! navigation experiments from a single JSON config.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;
use relnav::estimator::FilterMode;

#[derive(Parser)]
#[command(
    name = "relnav",
    about = "Object-relative visual-inertial state estimation with learned measurement uncertainty",
    version
)]
struct Cli {
    /// JSON config file; built-in defaults are used when omitted.
    #[arg(long, global = true, env = "RELNAV_CONFIG")]
    config: Option<PathBuf>,

    /// Override the config's global seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset directory (imu.csv, meas.csv, truth.csv,
    /// layout.json, spec.json).
    Simulate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train the uncertainty head on a dataset and write it as JSON,
    /// optionally with a held-out calibration report.
    TrainHead {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run the filter over a dataset in one mode and write the trajectory
    /// result CSV.
    RunFilter {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = parse_mode)]
        mode: FilterMode,
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Compare filter modes over seeded noise realizations; writes
    /// comparison.csv/.txt, per_seed.json, and the trained head.
    Evaluate {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        head: Option<PathBuf>,
        /// Subset of modes to compare (default: config's eval.modes).
        #[arg(long, value_delimiter = ',', value_parser = parse_mode)]
        modes: Option<Vec<FilterMode>>,
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Compute metrics for a stored result against its dataset and export
    /// plot data series.
    Report {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        result: PathBuf,
        #[arg(long)]
        head: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn parse_mode(s: &str) -> Result<FilterMode, String> {
    s.parse()
}

fn execute(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }

    match cli.command {
        Command::Simulate { out, force } => commands::simulate(&config, &out, force),
        Command::TrainHead {
            dataset,
            out,
            report,
            force,
        } => commands::cmd_train_head(&config, &dataset, &out, report.as_deref(), force),
        Command::RunFilter {
            dataset,
            mode,
            head,
            out,
            force,
        } => commands::run_filter(&config, &dataset, mode, head.as_deref(), &out, force),
        Command::Evaluate {
            out,
            head,
            modes,
            seeds,
            force,
        } => commands::evaluate(&config, &out, head.as_deref(), modes, seeds, force),
        Command::Report {
            dataset,
            result,
            head,
            out,
            force,
        } => commands::report(&dataset, &result, head.as_deref(), &out, force),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            // Machine-readable failure on stderr.
            eprintln!("{}", serde_json::json!({ "error": format!("{err:#}") }));
            ExitCode::FAILURE
        }
    }
}
