//! `mcmixit`: synthesize data, train, evaluate and separate.

mod config;
mod error;
mod eval;
mod separate;
mod synth;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use config::RunConfig;
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mcmixit", version, about = "Multi-channel mixture invariant training toolkit")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML config file with [model], [train] and [data] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data and initialization; overrides `train.seed`.
    #[arg(long, global = true, env = "MCMIXIT_SEED")]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a dataset shard (WAV files plus manifest.jsonl).
    Synth(synth::SynthArgs),
    /// Train a model, writing checkpoints and a metrics log to a run directory.
    Train(train::TrainArgs),
    /// Score a checkpoint on a shard or on generated examples.
    Eval(eval::EvalArgs),
    /// Separate a WAV file into one WAV per output.
    Separate(separate::SeparateArgs),
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = RunConfig::load(cli.global.config.as_deref())?;
    if let Some(seed) = cli.global.seed {
        config.train.seed = seed;
    }
    match cli.command {
        Command::Synth(a) => synth::run(a, config),
        Command::Train(a) => train::run(a, config, cli.global.seed, cli.global.config.is_some()),
        Command::Eval(a) => eval::run(a, config),
        Command::Separate(a) => separate::run(a),
    }
}

fn main() -> ExitCode {
    let reference = config::reference();
    let mut command = Cli::command().after_long_help(reference.clone());
    for sub in ["synth", "train", "eval"] {
        command = command.mut_subcommand(sub, |c| c.after_long_help(reference.clone()));
    }
    let cli = match command.try_get_matches().and_then(|m| Cli::from_arg_matches(&m)) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
