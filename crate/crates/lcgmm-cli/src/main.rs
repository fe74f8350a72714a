use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(lcgmm_cli::cli::run(std::env::args_os()) as u8)
}
