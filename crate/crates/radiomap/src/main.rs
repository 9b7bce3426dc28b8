use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(radiomap::cli::run_command(std::env::args()) as u8)
}
