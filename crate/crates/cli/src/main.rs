use std::process::ExitCode;

use asr_lab::{run, Cli};
use clap::Parser;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("asr-lab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
