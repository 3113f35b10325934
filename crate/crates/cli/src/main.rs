//! `modp`: demonstrations, training, evaluation, ablation, telemetry
//! analysis and live steering from one binary.
//!
//! Any config field can be overridden with `--dotted.path VALUE`
//! (`--moe.beta 0`, `--train.epochs 20`).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use modp::Error;

#[derive(Parser, Debug)]
#[command(
    name = "modp",
    version,
    about = "Mixture-of-experts diffusion policy toolkit"
)]
pub struct Cli {
    /// JSON config layered over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parent directory for numbered run directories.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Record scripted-expert demonstrations.
    GenDemos {
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train a policy on a demonstration file.
    Train {
        #[arg(long)]
        demos: Option<PathBuf>,
    },
    /// Roll out a checkpoint and print the report as JSON.
    Eval(EvalArgs),
    /// Train and evaluate every auxiliary-loss variant.
    Ablate {
        #[arg(long)]
        demos: Option<PathBuf>,
    },
    /// Export the activation timeline of an evaluation report.
    Analyze {
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Serve a checkpoint for live steering over WebSocket.
    Steer {
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long)]
        port: Option<u16>,
    },
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub condition: Option<ConditionArg>,
    #[arg(long)]
    pub rollouts: Option<usize>,
    /// Comma-separated evaluation seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ConditionArg {
    Nominal,
    Disturbed,
}

const USAGE: u8 = 1;
const DATA: u8 = 2;
const RUNTIME: u8 = 3;

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => USAGE,
        Error::Format(_)
        | Error::Json(_)
        | Error::Io { .. }
        | Error::Contract(_)
        | Error::Dimension { .. }
        | Error::Domain { .. } => DATA,
        Error::Aborted { .. }
        | Error::Numeric(_)
        | Error::State(_)
        | Error::Planning(_)
        | Error::Network(_) => RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let (args, overrides) = match config::extract_overrides(std::env::args().collect()) {
        Ok(split) => split,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(USAGE);
        }
    };
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage {
                ExitCode::from(USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
