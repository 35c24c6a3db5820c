use std::process::ExitCode;

fn main() -> ExitCode {
    gridforge::cli::main_with_args(std::env::args_os())
}
