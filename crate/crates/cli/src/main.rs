use std::process::ExitCode;

use clap::Parser;
use trajattn_cli::{exit_code, init_threads, run, Cli, EXIT_INVARIANT};

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| run(&cli));
    match result {
        Ok(outcome) => {
            println!("{}", outcome.report);
            if outcome.passed {
                ExitCode::SUCCESS
            } else {
                eprintln!("one or more invariants failed");
                ExitCode::from(EXIT_INVARIANT as u8)
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
