//! `fmvp`: train, evaluate, gradient-check and inspect partitions.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fmvp_core::config::{RunConfig, RunMode};
use fmvp_core::experiment::{self, GRADCHECK_TOLERANCE};
use fmvp_core::Error;

#[derive(Parser)]
#[command(name = "fmvp", version, about = "Federated multimodal visual prompt tuning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run federated training and write metrics, ledger, checkpoint and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// `section.key=value`, applied after the file.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
    },
    /// Evaluate a checkpoint and print one metrics row.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        mode: RunMode,
    },
    /// Compare analytic and finite-difference gradients of the training loss.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Print the client/class split.
    Partition {
        #[arg(long)]
        config: PathBuf,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_NUMERIC: u8 = 3;
const EXIT_MODEL: u8 = 4;
const EXIT_GRADCHECK: u8 = 5;

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Parse { .. } => EXIT_CONFIG,
        Error::Diverged { .. } | Error::NonFinite { .. } => EXIT_NUMERIC,
        _ => EXIT_MODEL,
    }
}

fn load(path: &Path, sets: &[String]) -> Result<RunConfig, Error> {
    let overrides = sets
        .iter()
        .map(|s| RunConfig::parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    RunConfig::load(path, &overrides)
}

fn train(config: &Path, sets: &[String]) -> Result<(), Error> {
    let cfg = load(config, sets)?;
    let artifacts = experiment::run_training(&cfg)?;
    artifacts.write(&cfg.output_dir)?;
    println!("{}", artifacts.report);
    if let Some(last) = artifacts.history.last() {
        println!(
            "final: base {:.4} new {:.4} hm {:.4}",
            last.base_acc, last.new_acc, last.hm
        );
    }
    println!("wrote {}", cfg.output_dir.display());
    Ok(())
}

fn eval(checkpoint: &Path, config: &Path, mode: RunMode) -> Result<(), Error> {
    let cfg = load(config, &[])?;
    let bytes = std::fs::read(checkpoint).map_err(|e| Error::Format {
        offset: 0,
        msg: format!("cannot read {}: {e}", checkpoint.display()),
    })?;
    let (header, record) = experiment::evaluate_checkpoint(&cfg, mode, &bytes)?;
    println!("{header}");
    println!("{}", record.csv_row());
    Ok(())
}

fn gradcheck(config: &Path, corrupt: bool) -> Result<bool, Error> {
    let cfg = load(config, &[])?;
    let g = experiment::gradcheck(&cfg, corrupt)?;
    println!("coordinates: {}", g.coordinates);
    println!("loss: {:.12e}", g.loss);
    println!("max relative error: {:.6e} at {}", g.max_rel_error, g.worst);
    Ok(g.max_rel_error < GRADCHECK_TOLERANCE)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train { config, set } => train(&config, &set).map(|_| true),
        Command::Eval { checkpoint, config, mode } => eval(&checkpoint, &config, mode).map(|_| true),
        Command::Gradcheck { config, corrupt_gradient } => gradcheck(&config, corrupt_gradient),
        Command::Partition { config } => load(&config, &[])
            .and_then(|cfg| experiment::partition_report(&cfg))
            .map(|text| {
                println!("{text}");
                true
            }),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: gradient check tolerance {GRADCHECK_TOLERANCE:e} exceeded");
            ExitCode::from(EXIT_GRADCHECK)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
