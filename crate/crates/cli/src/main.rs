//! `tera`: feature extraction, synthetic corpora, pre-training, representation
//! extraction, probing and self-checks.
//!
//! Exit codes: 0 success, 1 validation error (bad flag, config, manifest or
//! data), 2 runtime fault (I/O, numeric failure, failed self-check).

mod commands;
mod manifest;

use std::process::ExitCode;

use clap::Parser;

use commands::Cli;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            });
        }
    };
    match commands::run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
