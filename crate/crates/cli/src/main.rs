use std::process::ExitCode;

fn main() -> ExitCode {
    ExitCode::from(dscsim_cli::main_from(std::env::args_os()))
}
