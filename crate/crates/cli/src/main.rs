//! `pptlab`: builds purified process tensors, measures memory complexity,
//! evaluates multi-time correlations and runs the tomography pipelines.
//!
//! Exit codes: 0 on success, 1 on invalid input, 2 when a numerical
//! procedure did not converge.

mod args;
mod commands;
mod config;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{CommandFactory, FromArgMatches};

use args::{Cli, SUBCOMMANDS};

fn parse(argv: &[String]) -> Result<Cli, clap::Error> {
    let mut cmd = Cli::command().args_override_self(true);
    for name in SUBCOMMANDS {
        cmd = cmd.mut_subcommand(name, |s| s.args_override_self(true));
    }
    let matches = cmd.try_get_matches_from(argv)?;
    Cli::from_arg_matches(&matches)
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var("PPTLAB_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("PPTLAB_THREADS: expected a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| format!("PPTLAB_THREADS: {e}"))
}

fn run(mut argv: Vec<String>) -> u8 {
    match config::config_path(&argv) {
        Ok(Some(p)) => match config::config_tokens(p.as_ref()) {
            Ok(extra) => argv.extend(extra),
            Err(e) => {
                eprintln!("error: {e}");
                return 1;
            }
        },
        Ok(None) => {}
        Err(e) => {
            eprintln!("error: {e}");
            return 1;
        }
    }
    let cli = match parse(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return 1;
    }
    match commands::execute(&cli) {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("error: {}", f.message());
            f.code()
        }
    }
}

fn main() -> ExitCode {
    ExitCode::from(run(std::env::args().collect()))
}
