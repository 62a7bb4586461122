//! Command-line entry point.
//!
//! Exit codes: 0 success, 2 configuration errors (bad config file, missing
//! inputs, stamp mismatches), 1 any other runtime failure. Logs go to stderr
//! without timestamps so repeated runs produce identical output.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use velofed::evalkit::Variant;
use velofed::Error;
use velofed_cli::config::Loaded;
use velofed_cli::pipeline;

#[derive(Parser)]
#[command(
    name = "velofed",
    version,
    about = "Federated gradient-boosted forecasting of bike-share demand"
)]
struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Stderr log verbosity.
    #[arg(long, global = true, value_enum, default_value_t = LogArg::Info)]
    log: LogArg,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum LogArg {
    Info,
    Debug,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    /// Centralized baseline: one pooled model per task.
    Cml,
    /// Federated: client ensembles plus a collaboratively trained
    /// aggregation layer.
    Hfl,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse, clean, and aggregate raw trips into the hourly demand store.
    Ingest,
    /// Fit all 12 task models (2 targets x 6 horizons) of one variant.
    Train {
        #[arg(long, value_enum)]
        variant: VariantArg,
    },
    /// Score every trained variant on the test split.
    Evaluate,
    /// Render metric artifacts into report.txt and print it.
    Report,
}

fn run(cli: &Cli) -> velofed::Result<()> {
    let path = cli
        .config
        .as_deref()
        .ok_or_else(|| Error::config("--config <path> is required"))?;
    let loaded = Loaded::from_file(path)?;
    match &cli.cmd {
        Cmd::Ingest => {
            pipeline::cmd_ingest(&loaded)?;
        }
        Cmd::Train { variant } => {
            let v = match variant {
                VariantArg::Cml => Variant::Cml,
                VariantArg::Hfl => Variant::HflGlobal,
            };
            pipeline::cmd_train(&loaded, v)?;
        }
        Cmd::Evaluate => {
            pipeline::cmd_evaluate(&loaded)?;
        }
        Cmd::Report => {
            print!("{}", pipeline::cmd_report(&loaded)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.log {
        LogArg::Info => log::LevelFilter::Info,
        LogArg::Debug => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
