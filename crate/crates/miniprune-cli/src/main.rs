//! `miniprune` — pretrain, prune, recover, evaluate, compare, inspect.
//!
//! Every command is driven by a single JSON run config (see `config.rs`
//! for the sections and defaults) plus repeatable `--set key.path=value`
//! overrides. Exit codes: 0 success, 2 usage or input error, 3 numerical
//! failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use miniprune_core::{CoreError, Result};

#[derive(Parser)]
#[command(
    name = "miniprune",
    version,
    about = "Structured pruning toolkit for tiny decoder-only language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a fresh dense model on a byte-level corpus.
    Pretrain {
        /// JSON run config.
        #[arg(long)]
        config: PathBuf,
        /// Directory for the checkpoint, loss log, and effective config.
        #[arg(long)]
        out_dir: PathBuf,
        /// Override a config value, e.g. --set train.steps=500.
        #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
        set: Vec<String>,
    },
    /// Score, rank, and slice a dense model into a pruned one.
    Prune {
        #[arg(long)]
        config: PathBuf,
        /// Directory holding the input model checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
        set: Vec<String>,
    },
    /// Train low-rank adapters on a pruned model and merge them.
    Recover {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
        set: Vec<String>,
    },
    /// Report validation perplexity for a model.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Optional directory for the JSON report.
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
        set: Vec<String>,
    },
    /// Run the criterion x ratio x seed grid and tabulate perplexities.
    Compare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long = "set", value_name = "KEY.PATH=VALUE")]
        set: Vec<String>,
    },
    /// Summarize a pruning plan; with two plans, their overlap.
    Inspect {
        /// plan.json to summarize.
        #[arg(long)]
        plan: PathBuf,
        /// Second plan to compare retained sets against.
        #[arg(long)]
        plan_b: Option<PathBuf>,
    },
}

/// `MINIPRUNE_THREADS` caps worker parallelism. The current build
/// evaluates serially, so any valid value acts as a cap of one; invalid
/// values are still rejected so scripts fail loudly.
fn worker_cap() -> Result<usize> {
    match std::env::var("MINIPRUNE_THREADS") {
        Err(_) => Ok(1),
        Ok(raw) => {
            let n: usize = raw.parse().map_err(|_| {
                CoreError::config(format!(
                    "MINIPRUNE_THREADS must be a positive integer, got '{raw}'"
                ))
            })?;
            if n == 0 {
                return Err(CoreError::config(
                    "MINIPRUNE_THREADS must be a positive integer, got '0'",
                ));
            }
            println!("[env] MINIPRUNE_THREADS={n} (current build evaluates serially; cap applied as 1)");
            Ok(n.min(1))
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    worker_cap()?;
    match cli.command {
        Command::Pretrain { config, out_dir, set } => {
            let cfg = config::load_config(&config, &set)?;
            commands::cmd_pretrain(&cfg, &out_dir)
        }
        Command::Prune { config, model, out_dir, set } => {
            let cfg = config::load_config(&config, &set)?;
            commands::cmd_prune(&cfg, &model, &out_dir)
        }
        Command::Recover { config, model, out_dir, set } => {
            let cfg = config::load_config(&config, &set)?;
            commands::cmd_recover(&cfg, &model, &out_dir)
        }
        Command::Eval { config, model, out_dir, set } => {
            let cfg = config::load_config(&config, &set)?;
            commands::cmd_eval(&cfg, &model, out_dir.as_deref())
        }
        Command::Compare { config, model, out_dir, set } => {
            let cfg = config::load_config(&config, &set)?;
            commands::cmd_compare(&cfg, &model, &out_dir)
        }
        Command::Inspect { plan, plan_b } => commands::cmd_inspect(&plan, plan_b.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}
