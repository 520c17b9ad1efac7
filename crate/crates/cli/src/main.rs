//! `cfsm` command line: gradcheck | pretrain | train | eval | inspect.
//!
//! Exit codes: 0 success, 1 validation failure, 2 numeric failure.

use clap::{Parser, Subcommand, ValueEnum};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cfsm::config::ExperimentConfig;
use cfsm::error::Error;
use cfsm::scenario::EvalMode;

#[derive(Parser)]
#[command(name = "cfsm", about = "Common factorised space model experiments", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference check of every differentiable op and composite.
    Gradcheck {
        /// Random stream seed for the check instances.
        #[arg(long, default_value_t = 20240101)]
        seed: u64,
        /// Instances per elementary op.
        #[arg(long, default_value_t = 20)]
        instances: usize,
        /// Deliberately corrupt the named entry's analytic gradient
        /// (negative control; the run must then fail).
        #[arg(long)]
        perturb: Option<String>,
    },
    /// Source-only supervised pre-training.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Full pipeline: pre-train (when the variant wants it) plus joint
    /// training, metrics and diagnostics.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on the config's evaluation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Override the scenario's evaluation mode.
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Export histogram and top-k diagnostics for a checkpoint.
    Inspect {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Classification,
    Retrieval,
}

impl From<Mode> for EvalMode {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Classification => EvalMode::Classification,
            Mode::Retrieval => EvalMode::Retrieval,
        }
    }
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Numeric(_) => 2,
        _ => 1,
    }
}

fn load_config(path: &Path, seed: Option<u64>) -> Result<ExperimentConfig, Error> {
    let mut config = ExperimentConfig::load(path)?;
    if let Some(s) = seed {
        config.seed = s;
    }
    Ok(config)
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gradcheck {
            seed,
            instances,
            perturb,
        } => {
            let report = cfsm::gradcheck::run_full_suite(seed, instances, perturb.as_deref())?;
            println!("{:<40} {:>10} {:>14}  result", "op", "instances", "max rel err");
            for e in &report.entries {
                println!(
                    "{:<40} {:>10} {:>14.3e}  {}",
                    e.name,
                    e.instances,
                    e.max_rel_err,
                    if e.pass { "pass" } else { "FAIL" }
                );
            }
            if report.all_pass() {
                println!("gradcheck: all entries below {:.0e}", cfsm::gradcheck::TOLERANCE);
                Ok(())
            } else {
                let worst = report.worst().expect("entries nonempty");
                Err(Error::Numeric(format!(
                    "gradient check failed for {} (max rel err {:.3e})",
                    worst.name, worst.max_rel_err
                )))
            }
        }
        Command::Pretrain { config, out, seed } => {
            let config = load_config(&config, seed)?;
            let artifacts = cfsm::runner::run_pretrain(&config, out.as_deref())?;
            println!(
                "pretrain complete: {} (final epoch: {})",
                artifacts.out_dir.display(),
                serde_json::to_string(&artifacts.final_epoch)?
            );
            Ok(())
        }
        Command::Train { config, out, seed } => {
            let config = load_config(&config, seed)?;
            let artifacts = cfsm::runner::run_train(&config, out.as_deref())?;
            println!(
                "train complete: {} (final epoch: {})",
                artifacts.out_dir.display(),
                serde_json::to_string(&artifacts.final_epoch)?
            );
            Ok(())
        }
        Command::Eval {
            config,
            checkpoint,
            mode,
            seed,
        } => {
            let config = load_config(&config, seed)?;
            let metrics = cfsm::runner::run_eval(&config, &checkpoint, mode.map(EvalMode::from))?;
            println!("{}", serde_json::to_string_pretty(&metrics)?);
            Ok(())
        }
        Command::Inspect {
            config,
            checkpoint,
            out,
            seed,
        } => {
            let config = load_config(&config, seed)?;
            let dir = cfsm::runner::run_inspect(&config, &checkpoint, out.as_deref())?;
            println!("diagnostics written to {}", dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}
