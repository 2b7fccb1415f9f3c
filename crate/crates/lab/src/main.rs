use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(gatera_lab::cli::run(std::env::args_os()))
}
