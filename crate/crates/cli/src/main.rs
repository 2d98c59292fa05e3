//! `qupel` command-line entry point.
//!
//! Exit codes: 0 success, 1 failed check or I/O error, 2 invalid config,
//! 3 divergence.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "qupel", version, about = "Quantized personalized federated learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment from a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's `out`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "info")]
        log_level: String,
    },
    /// Run the finite-difference and prox-oracle suites.
    Gradcheck {
        /// Tolerance for every finite-difference family.
        #[arg(long)]
        tol: Option<f64>,
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, hide = true)]
        inject_wrong_sign: bool,
        #[arg(long, default_value = "warn")]
        log_level: String,
    },
    /// Run several modes over several seeds and report their ordering.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value = "info")]
        log_level: String,
    },
}

fn init_logging(level: &str) {
    env_logger::Builder::new().parse_filters(level).format_timestamp(None).init();
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, out, log_level } => {
            init_logging(&log_level);
            commands::run(&config, out).map(|_| ())
        }
        Command::Gradcheck { tol, instances, inject_wrong_sign, log_level } => {
            init_logging(&log_level);
            commands::gradcheck(tol, instances, inject_wrong_sign)
        }
        Command::Compare { config, out, log_level } => {
            init_logging(&log_level);
            commands::compare(&config, out).map(|_| ())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
