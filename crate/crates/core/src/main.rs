use std::process::ExitCode;

use clap::Parser;
use kgtn::cli::{execute, Cli};

fn main() -> ExitCode {
    ExitCode::from(execute(Cli::parse()) as u8)
}
