mod args;
mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use crate::args::Cli;

/// Failure classes map to exit codes 1 (configuration), 2 (data) and 3
/// (numerical).
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
    #[error(transparent)]
    Core(#[from] dcfa::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) | CliError::Core(dcfa::Error::Config(_)) => "config",
            CliError::Numerical(_) | CliError::Core(dcfa::Error::Numerical(_)) => "numerical",
            _ => "data",
        }
    }

    fn code(&self) -> u8 {
        match self.kind() {
            "config" => 1,
            "data" => 2,
            _ => 3,
        }
    }
}

fn fail(kind: &str, code: u8, reason: &str) -> ExitCode {
    eprintln!("error kind={kind} code={code} reason={reason:?}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            return fail("config", 1, line);
        }
    };
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e.kind(), e.code(), &e.to_string()),
    }
}
