//! Command implementations behind the `segrisk` binary.

pub mod args;
pub mod commands;
pub mod files;

use anyhow::Result;

use args::{Cli, Command};
use segrisk::Exec;

pub fn run(cli: &Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::default() };
    match &cli.command {
        Command::GenSynth(a) => commands::gen_synth::run(a, exec),
        Command::Train(a) => commands::train::run_train(a, exec),
        Command::CompareLosses(a) => commands::train::run_compare(a, exec),
        Command::Features(a) => commands::features::run(a, exec),
        Command::Classify(a) => commands::classify::run(a, exec),
        Command::Metrics(a) => commands::metrics::run(a),
    }
}

/// 2 for numeric failures (divergence, undefined statistics), 1 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    let numeric = err.chain().any(|e| e.downcast_ref::<segrisk::Error>().is_some_and(segrisk::Error::is_numeric));
    if numeric {
        2
    } else {
        1
    }
}
