//! `crm`: conformal training, evaluation and estimator studies from a config file.
//!
//! Exit codes: 0 success, 1 a reported check failed, 2 usage, config or input error.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::Outcome;
use config::RunConfig;

#[derive(Parser)]
#[command(name = "crm", version, about = "Conformal risk minimization runs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `[run] out`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Top-level seed; overrides `[run] seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write model.crml and history.csv.
    Train(Common),
    /// Evaluate a checkpoint over random calibration/test splits.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Bias/variance study of the quantile-gradient estimators.
    Study(Common),
    /// Sample the configured Gaussian mixture into a dataset cache.
    GenGmm(Common),
}

fn run(cli: Cli) -> error::Result<Outcome> {
    let common = match &cli.command {
        Command::Train(c) | Command::Study(c) | Command::GenGmm(c) => c,
        Command::Eval { common, .. } => common,
    };
    let origin = common.config.as_path();
    let cfg = RunConfig::load(origin)?.with_seed(common.seed);
    let out = common.out.clone().unwrap_or_else(|| cfg.run.out.clone());
    match &cli.command {
        Command::Train(_) => commands::cmd_train(&cfg, origin, &out),
        Command::Eval { checkpoint, trials, .. } => commands::cmd_eval(&cfg, origin, checkpoint, *trials, &out),
        Command::Study(_) => commands::cmd_study(&cfg, origin, &out),
        Command::GenGmm(_) => commands::cmd_gen_gmm(&cfg, &out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
