//! `nexus` — operator entry point for the forecasting pipeline.
//!
//! The standard experiment is a chain of subcommands sharing one output
//! directory:
//!
//! ```text
//! nexus generate --out run        # synthetic raw observations
//! nexus prepare  --out run        # quality control, alignment, statistics
//! nexus train    --out run        # fit the model, save a checkpoint
//! nexus evaluate --out run        # held-out metrics and residuals
//! nexus ablate   --out run        # architecture-variant comparison
//! nexus analyze  --out run        # diurnal/monthly/regime/correlation tables
//! nexus predict  --out run        # next-step forecast from the data's end
//! ```
//!
//! Every command is deterministic given the configuration file and seed, and
//! echoes the effective merged configuration into the output directory.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::RunConfig;

/// Exit codes: 0 success, 2 input validation, 3 artifact mismatch,
/// 4 numerical failure.
#[derive(Debug)]
pub enum CliError {
    Validation(String),
    Mismatch(String),
    Numerical(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Mismatch(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Validation(m) | CliError::Mismatch(m) | CliError::Numerical(m) => m,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<nexus_core::data::DataError> for CliError {
    fn from(e: nexus_core::data::DataError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<nexus_core::ModelError> for CliError {
    fn from(e: nexus_core::ModelError) -> Self {
        use nexus_core::ModelError::*;
        match e {
            Checkpoint(m) => CliError::Mismatch(m),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<nexus_core::train::TrainError> for CliError {
    fn from(e: nexus_core::train::TrainError) -> Self {
        use nexus_core::train::TrainError::*;
        match e {
            Diverged(m) => CliError::Numerical(m),
            Model(m) => m.into(),
            Metrics(m) => m.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<nexus_core::metrics::MetricsError> for CliError {
    fn from(e: nexus_core::metrics::MetricsError) -> Self {
        use nexus_core::metrics::MetricsError::*;
        match e {
            Degenerate(m) => CliError::Numerical(m),
            other => CliError::Validation(other.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "nexus",
    version,
    about = "Compact spatiotemporal air-quality forecasting pipeline"
)]
struct Cli {
    /// TOML configuration file; sections [model], [train], [synth], [split]
    /// mirror the library configs. Flags override file keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Global random seed, overriding the config file's seeds.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,

    /// Directory for input/output artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic raw observation CSV with known structure.
    Generate {
        /// Days of hourly data to simulate (minimum 30).
        #[arg(long, value_name = "INT")]
        days: Option<usize>,
        /// Output CSV path (default: <out>/raw.csv).
        #[arg(short, long, value_name = "PATH")]
        output: Option<PathBuf>,
    },
    /// Quality-control and align a raw CSV; writes aligned.csv and
    /// norm_stats.json.
    Prepare {
        /// Raw observation CSV (default: <out>/raw.csv).
        #[arg(short, long, value_name = "PATH")]
        input: Option<PathBuf>,
    },
    /// Train on a prepared dataset; writes model.ckpt and train_report.csv.
    Train {
        /// Aligned table from `prepare` (default: <out>/aligned.csv).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Score a checkpoint on a held-out split; writes metrics.csv and
    /// residuals.csv.
    Evaluate {
        /// Checkpoint from `train` (default: <out>/model.ckpt).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Aligned table from `prepare` (default: <out>/aligned.csv).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
        /// Which temporal split to score: train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and score every architecture variant; writes ablation.csv.
    Ablate {
        /// Aligned table from `prepare` (default: <out>/aligned.csv).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Descriptive analyses of a prepared dataset; writes diurnal.csv,
    /// monthly.csv, regime.csv, and correlations.csv.
    Analyze {
        /// Aligned table from `prepare` (default: <out>/aligned.csv).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Forecast the next 3-hour step from the end of a prepared dataset;
    /// writes forecast.csv.
    Predict {
        /// Checkpoint from `train` (default: <out>/model.ckpt).
        #[arg(long, value_name = "PATH")]
        checkpoint: Option<PathBuf>,
        /// Aligned table from `prepare` (default: <out>/aligned.csv).
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::load(cli.config.as_deref(), cli.seed)?;
    std::fs::create_dir_all(&cli.out)?;
    cfg.write_effective(&cli.out)?;
    match cli.command {
        Command::Generate { days, output } => commands::generate(&cfg, &cli.out, days, output),
        Command::Prepare { input } => commands::prepare(&cfg, &cli.out, input),
        Command::Train { data } => commands::train_cmd(&cfg, &cli.out, data),
        Command::Evaluate {
            checkpoint,
            data,
            split,
        } => commands::evaluate(
            &cfg,
            cli.config.is_some(),
            &cli.out,
            checkpoint,
            data,
            &split,
        ),
        Command::Ablate { data } => commands::ablate(&cfg, &cli.out, data),
        Command::Analyze { data } => commands::analyze(&cfg, &cli.out, data),
        Command::Predict { checkpoint, data } => commands::predict(&cli.out, checkpoint, data),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
