mod args;
mod run;

use std::process::ExitCode;

use clap::Parser;
use kwf_rerank::ErrorKind;

use args::{Cli, Command};

/// A rejected or inconsistent configuration (exit status 3).
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// An internal consistency check failed (exit status 4).
#[derive(Debug)]
pub struct InvariantError(pub String);

impl std::fmt::Display for InvariantError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for InvariantError {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<kwf_rerank::Error>() {
            return match e.kind() {
                ErrorKind::Input => 2,
                ErrorKind::Config => 3,
                ErrorKind::Invariant => 4,
            };
        }
        if cause.is::<ConfigError>() {
            return 3;
        }
        if cause.is::<InvariantError>() {
            return 4;
        }
    }
    2
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Eval(a) => run::eval(a),
        Command::Sweep(a) => run::sweep(a),
        Command::Bench(a) => run::bench(a),
        Command::Synth(a) => run::synth(a),
        Command::BuildIndex(a) => run::build_index(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
