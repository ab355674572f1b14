use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use frisbi::baselines::BaselineKind;
use frisbi_cli::experiment::{cmd_run, cmd_simulate, RunOptions, Stage, Sweep};
use frisbi_cli::report::cmd_report;
use frisbi_cli::{CliError, ExperimentConfig, Result};

#[derive(Parser)]
#[command(name = "frisbi", about = "Pendulum benchmark for amortized SBI under misspecification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset splits.
    Simulate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Train and evaluate over folds.
    Run {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
        /// Comma-separated subset of npe,transfer,amortize,evaluate.
        #[arg(long, value_delimiter = ',')]
        stages: Option<Vec<String>>,
        /// calib or noise.
        #[arg(long)]
        sweep: Option<String>,
        /// Comma-separated baseline names.
        #[arg(long, value_delimiter = ',')]
        baselines: Option<Vec<String>>,
        /// Write transport plans of the transductive baselines.
        #[arg(long)]
        export_plans: bool,
    },
    /// Aggregate results into tables.
    Report {
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn load_config(path: Option<PathBuf>) -> Result<ExperimentConfig> {
    match path {
        Some(p) => ExperimentConfig::load(&p),
        None => Ok(ExperimentConfig::default()),
    }
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { config, out } => {
            let m = cmd_simulate(&load_config(config)?, &out)?;
            println!("data {}", m.data_hash);
        }
        Command::Run {
            config,
            out,
            stages,
            sweep,
            baselines,
            export_plans,
        } => {
            let cfg = load_config(config)?;
            let mut opts = RunOptions {
                export_plans,
                ..RunOptions::default()
            };
            if let Some(s) = stages {
                opts.stages = s.iter().map(|s| s.trim().parse()).collect::<Result<_>>()?;
            }
            if let Some(b) = baselines {
                let kinds = b
                    .iter()
                    .map(|s| s.trim().parse::<BaselineKind>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| CliError::config("baselines", e.to_string()))?;
                opts.baselines = Some(kinds);
            }
            opts.sweep = sweep.map(|s| s.parse::<Sweep>()).transpose()?;
            let manifests = cmd_run(&cfg, &out, &opts)?;
            let stages: Vec<&str> = opts.stages.iter().map(|s: &Stage| s.name()).collect();
            println!("ran {} configuration(s), stages {}", manifests.len(), stages.join(","));
        }
        Command::Report { out } => {
            let rows = cmd_report(&out)?;
            println!("{} rows", rows.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
