use std::process::ExitCode;

fn main() -> ExitCode {
    angleattn::cli::run(std::env::args_os())
}
