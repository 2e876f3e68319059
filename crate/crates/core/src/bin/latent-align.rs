use std::process::ExitCode;

fn main() -> ExitCode {
    latent_align::cli::main()
}
