mod args;
mod commands;

use std::process::ExitCode;

use clap::Parser;
use tracing_subscriber::EnvFilter;

use args::{Cli, Command};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let default = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    tracing_subscriber::fmt()
        .with_env_filter(
            EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new(default)),
        )
        .with_writer(std::io::stderr)
        .init();

    let result = match &cli.command {
        Command::Attack(args) => commands::attack(args),
        Command::Baseline(args) => commands::baseline(args),
        Command::Metrics(args) => commands::metrics(args),
    };
    result.unwrap_or_else(|err| {
        eprintln!("error: {err}");
        err.exit_code()
    })
}
