use clap::Parser;
use dpssm_cli::commands::{run, Cli};
use dpssm_cli::{exit_code, EXIT_CHECK, EXIT_OK};

fn main() {
    let cli = Cli::parse();
    let code = match run(cli.command) {
        Ok(failed) if failed.is_empty() => EXIT_OK,
        Ok(failed) => {
            eprintln!("failed checks: {}", failed.join(", "));
            EXIT_CHECK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    std::process::exit(code);
}
