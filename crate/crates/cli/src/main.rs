use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = avae_cli::Cli::parse();
    match avae_cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
