use std::process::ExitCode;

fn main() -> ExitCode {
    trove::cli::run()
}
