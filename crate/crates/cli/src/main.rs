mod commands;
mod config;

use std::fmt;
use std::path::Path;
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;

use commands::Cli;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_SCHEMA: u8 = 4;
pub const EXIT_DIVERGENCE: u8 = 5;

/// Failure with its exit code, printed to stderr as one JSON line.
#[derive(Debug, Serialize)]
pub struct CliError {
    #[serde(skip)]
    pub code: u8,
    pub error: &'static str,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            error: "usage",
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            code: EXIT_IO,
            error: "io",
            message: format!("{}: {e}", path.display()),
        }
    }

    pub fn schema(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_SCHEMA,
            error: "schema",
            message: message.into(),
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let line = serde_json::to_string(self).unwrap_or_else(|_| format!("{{\"error\":\"{}\"}}", self.error));
        f.write_str(&line)
    }
}

impl From<tghoa::Error> for CliError {
    fn from(e: tghoa::Error) -> Self {
        use tghoa::data::DataError;
        use tghoa::Error as E;
        let message = e.to_string();
        match e {
            E::Io { .. } | E::Data(DataError::Io { .. }) => Self {
                code: EXIT_IO,
                error: "io",
                message,
            },
            E::Divergence { .. } | E::NonFiniteGradient { .. } => Self {
                code: EXIT_DIVERGENCE,
                error: "divergence",
                message,
            },
            E::Config(_) | E::Data(DataError::Config(_)) => Self::usage(message),
            _ => Self::schema(message),
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if !e.use_stderr() {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let first = e.to_string();
            let first = first.lines().next().unwrap_or("invalid arguments");
            let msg = first.trim_start_matches("error: ").to_string();
            eprintln!("{}", CliError::usage(msg));
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code)
        }
    }
}
