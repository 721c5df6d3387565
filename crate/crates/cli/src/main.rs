mod args;
mod commands;
mod error;

use args::{Cli, Command};
use clap::Parser;
use commands::Globals;
use error::CliError;
use std::process::ExitCode;

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n as usize)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot start {n} threads: {e}")))?;
    }
    let g = Globals {
        seed: cli.seed,
        timings: cli.timings,
    };
    match &cli.command {
        Command::Compress(a) => commands::compress(a, g),
        Command::Eval(a) => commands::eval(a),
        Command::Sweep(a) => commands::sweep(a, g),
        Command::Ablate(a) => commands::ablate(a, g),
        Command::GramDump(a) => commands::gram_dump(a),
        Command::Inspect(a) => commands::inspect(a),
        Command::Synth(a) => commands::synth(a, g),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.quiet {
            log::LevelFilter::Error
        } else {
            log::LevelFilter::Info
        })
        .parse_env("GRAIL_LOG")
        .init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
