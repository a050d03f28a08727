use clap::Parser;
use std::process::ExitCode;

fn main() -> ExitCode {
    match obidiff_cli::run(obidiff_cli::Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
