//! `cliffkit`: cliff-pair generation, training, evaluation and rendering.

mod commands;
mod failure;
mod manifest;
mod render;

use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::error;

use commands::{AttributeArgs, EvalArgs, GenerateArgs, PairsArgs, RenderArgs, ReplayArgs, TrainArgs};
use failure::{Failure, Outcome};

#[derive(Parser, Debug)]
#[command(name = "cliffkit", version, about = "Activity-cliff explanation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic compound set with planted decoration effects.
    Generate(GenerateArgs),
    /// Build cliff pairs from a compounds CSV.
    Pairs(PairsArgs),
    /// Train a model on a pair file and write a checkpoint.
    Train(TrainArgs),
    /// Test-set metrics for one checkpoint, or a paired sweep for two.
    Eval(EvalArgs),
    /// Per-atom attributions as JSONL.
    Attribute(AttributeArgs),
    /// SVG drawings of one pair's attributions against ground truth.
    Render(RenderArgs),
    /// Re-run a recorded invocation from its manifest.
    Replay(ReplayArgs),
}

fn configure_threads() -> Outcome<()> {
    let Ok(value) = std::env::var("CLIFFKIT_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .map_err(|_| Failure::input(anyhow::anyhow!("CLIFFKIT_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(Failure::input)
}

fn run(cli: Cli) -> Outcome<()> {
    configure_threads()?;
    match &cli.command {
        Command::Generate(a) => commands::generate(a),
        Command::Pairs(a) => commands::pairs(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::Attribute(a) => commands::attribute_cmd(a),
        Command::Render(a) => commands::render(a),
        Command::Replay(a) => commands::replay(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            error!("{failure}");
            ExitCode::from(failure.code)
        }
    }
}
