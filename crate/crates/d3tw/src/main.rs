use std::process::ExitCode;

fn main() -> ExitCode {
    d3tw::cli::run_from_args()
}
