use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(eqalloc_cli::run(std::env::args_os()))
}
