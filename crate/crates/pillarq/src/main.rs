use std::process::ExitCode;

use clap::Parser;

fn main() -> ExitCode {
    let cli = pillarq::cli::Cli::parse();
    match pillarq::cli::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
