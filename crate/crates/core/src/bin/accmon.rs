use std::panic;
use std::process::ExitCode;

use accuracy_monitor::cli;

fn main() -> ExitCode {
    let code = panic::catch_unwind(|| cli::run(std::env::args_os(), &mut std::io::stdout()))
        .unwrap_or(cli::EXIT_INTERNAL);
    ExitCode::from(code)
}
