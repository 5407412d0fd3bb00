use anyhow::Result;
use clap::{Parser, Subcommand};
use safeact_cli::{cmd_fitbox, cmd_run, cmd_validate, Mode, RunSpec};
use std::path::PathBuf;
use std::process::ExitCode;

/// Safety-filter scenario harness: run filtered/unfiltered sweeps, fit
/// obstacle boxes from masked depth views, validate scenario configs.
#[derive(Parser)]
#[command(name = "safeact", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run seeded episodes and write a metrics table plus logs.
    Run {
        /// Scenario config file (overridden by SAFEACT_SCENARIO).
        #[arg(long)]
        scenario: PathBuf,
        /// Number of episodes per mode.
        #[arg(long, default_value_t = 1)]
        episodes: usize,
        /// Base seed; episode i uses seed + i.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// filtered, unfiltered or both.
        #[arg(long, default_value = "filtered")]
        mode: String,
        /// Output directory for metrics.csv and episode logs.
        #[arg(long)]
        out: PathBuf,
        /// Skip writing per-episode trajectory logs.
        #[arg(long)]
        no_episode_logs: bool,
    },
    /// Fit oriented bounding boxes from masked depth camera views.
    Fitbox {
        /// Camera view files (TOML), one per view.
        #[arg(long, num_args = 1.., required = true)]
        cams: Vec<PathBuf>,
        /// Output box file.
        #[arg(long)]
        out: PathBuf,
        /// Optional voxel size for point deduplication (meters).
        #[arg(long)]
        voxel_m: Option<f64>,
    },
    /// Check a scenario config and report pass/fail per diagnostic.
    Validate {
        /// Scenario config file (overridden by SAFEACT_SCENARIO).
        #[arg(long)]
        scenario: PathBuf,
    },
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            scenario,
            episodes,
            seed,
            mode,
            out,
            no_episode_logs,
        } => {
            let spec = RunSpec {
                scenario,
                episodes,
                seed,
                mode: Mode::parse(&mode)?,
                out,
                episode_logs: !no_episode_logs,
            };
            let output = cmd_run(&spec)?;
            println!("metrics written to {}", output.metrics_path.display());
            Ok(if output.all_completed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Command::Fitbox { cams, out, voxel_m } => {
            let report = cmd_fitbox(&cams, &out, voxel_m)?;
            println!(
                "{} boxes written to {}",
                report.boxes.len(),
                report.out_path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Validate { scenario } => {
            let checks = cmd_validate(&scenario)?;
            Ok(if checks.iter().all(|c| c.pass) {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
    }
}

fn main() -> ExitCode {
    env_logger::init();
    match run() {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
