use std::process::ExitCode;

fn main() -> ExitCode {
    sparseflow::cli::main()
}
