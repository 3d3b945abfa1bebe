use std::process::ExitCode;

use clap::Parser;

use cffn::cli::{run, Cli};

fn main() -> ExitCode {
    // clap reports usage errors itself and exits with status 2
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
