mod args;
mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::{CommandFactory, FromArgMatches};

use crate::args::{Cli, Command};

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_ABORTED: u8 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_USAGE,
            message: message.into(),
        }
    }

    pub fn io(what: &str, e: std::io::Error) -> Self {
        CliError {
            code: 1,
            message: format!("{what}: {e}"),
        }
    }
}

impl From<abra_core::Error> for CliError {
    fn from(e: abra_core::Error) -> Self {
        use abra_core::Error as E;
        let code = match &e {
            E::TrainingAborted(_) => EXIT_ABORTED,
            E::InvalidConfig { .. }
            | E::Format { .. }
            | E::VersionMismatch { .. }
            | E::ShapeMismatch { .. }
            | E::InvalidShape { .. }
            | E::LabelOutOfRange { .. }
            | E::Io(_) => EXIT_USAGE,
            _ => 1,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

fn run() -> Result<(), CliError> {
    let argv = config::expand(std::env::args_os().collect())?;
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let cli = Cli::from_arg_matches(&matches).map_err(|e| CliError::usage(e.to_string()))?;
    let (name, sub) = matches.subcommand().expect("subcommand is required");
    match cli.command {
        Command::Gen(a) => commands::gen(&a, name, sub),
        Command::Train(a) => commands::train(&a, name, sub),
        Command::Eval(a) => commands::eval(&a, name, sub),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
