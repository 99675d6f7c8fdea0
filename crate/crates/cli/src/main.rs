use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(eri_cli::run(std::env::args_os()))
}
