//! `oar` — desk-scale RL laboratory driver: SFT warm-start, GRPO training
//! with selectable token-credit methods, evaluation studies, and report
//! rendering.

mod commands;
mod config;
mod manifest;
mod svg;

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "oar", version, about = "GRPO with outcome-grounded advantage reshaping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default configuration file to stdout.
    InitConfig,
    /// SFT warm-start: train on gold traces, save a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Run directory (default: $OAR_RUN_ROOT/pretrain-seed<N>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// GRPO training starting from a warm-start checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Credit method: vanilla | random | entropy | oar_p | oar_g.
        #[arg(long)]
        credit: Option<String>,
        /// Gate threshold override.
        #[arg(long)]
        tau: Option<f64>,
        /// Boost slope override.
        #[arg(long)]
        beta: Option<f64>,
        /// Outcome probe: lt_logits | as_mean | as_joint.
        #[arg(long)]
        probe: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        /// Treat every importance profile as degenerate (vanilla fallback).
        #[arg(long)]
        force_degenerate: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run one evaluation study against a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        study: commands::Study,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Aggregate one or more training runs into a table and SVG plots.
    Report {
        /// Run directories produced by `oar train`.
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn run() -> anyhow::Result<()> {
    match Cli::parse().command {
        Command::InitConfig => {
            print!("{}", config::DEFAULT_CONFIG);
            Ok(())
        }
        Command::Pretrain { config, out } => commands::cmd_pretrain(&config, out).map(|_| ()),
        Command::Train {
            config,
            checkpoint,
            credit,
            tau,
            beta,
            probe,
            seed,
            force_degenerate,
            steps,
            out,
        } => {
            let overrides = commands::TrainOverrides {
                credit,
                tau,
                beta,
                probe,
                seed,
                force_degenerate,
                total_steps: steps,
            };
            commands::cmd_train(&config, &checkpoint, &overrides, out).map(|_| ())
        }
        Command::Eval { checkpoint, study, config, out } => {
            commands::cmd_eval(&checkpoint, study, config.as_deref(), out).map(|_| ())
        }
        Command::Report { runs, out } => commands::cmd_report(&runs, out).map(|_| ()),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // Single-line machine-parsable prefix; chained causes inline.
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
