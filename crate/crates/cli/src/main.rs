//! `celora`: run federated experiments, communication tables, sweeps and
//! gradient-inversion attacks from a TOML config.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    /// Anything wrong with the configuration or the command line. Exit code 2.
    #[error("config error: {0}")]
    Config(String),
    /// Failures while running. Exit code 1.
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl From<celora::Error> for CliError {
    fn from(e: celora::Error) -> Self {
        match e {
            celora::Error::Config(msg) => CliError::Config(msg),
            other => CliError::Runtime(other.into()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "celora", version, about = "Federated tri-factor LoRA simulator")]
pub struct Cli {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set partition.alpha=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Method (overrides `method`): ce-lora, fedavg-lora, ffa-lora or local-only.
    #[arg(long, global = true)]
    method: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Axis {
    Alpha,
    Clients,
    Rank,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum TableFormat {
    Table,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one experiment and write metrics, final accuracies and a summary.
    Run,
    /// Parameters sent per client per round under each method.
    CommTable {
        #[arg(long, value_enum, default_value = "table")]
        format: TableFormat,
    },
    /// Rerun the experiment over one config axis and write `sweep.csv`.
    Sweep {
        #[arg(long, value_enum)]
        axis: Axis,
        /// Comma-separated values for the axis.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Comma-separated methods; defaults to the config's method.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<String>,
    },
    /// Gradient-inversion attack over the configured surfaces and batch sizes.
    Attack,
    /// Write the client partition as JSON.
    PartitionDump,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CELORA_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run => commands::run(&cli),
        Command::CommTable { format } => commands::comm_table(&cli, *format),
        Command::Sweep { axis, values, methods } => commands::sweep(&cli, *axis, values, methods),
        Command::Attack => commands::attack(&cli),
        Command::PartitionDump => commands::partition_dump(&cli),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(e.exit_code())
        }
    }
}
