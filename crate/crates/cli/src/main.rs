//! `permubias`: measure and mitigate option-order bias from the command line.

mod commands;
mod config;
mod output;

use std::process::ExitCode;

use clap::Parser;

use config::{Cli, ConfigError};

/// 0 success, 1 runtime failure, 2 configuration failure.
fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<permubias::Error>() {
        Some(
            permubias::Error::Config(_)
            | permubias::Error::Template(_)
            | permubias::Error::Validation { .. }
            | permubias::Error::Parse { .. },
        ) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
