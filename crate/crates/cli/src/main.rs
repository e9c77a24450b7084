use clap::Parser;
use driftless_cli::{execute_run, Cli, Command};

fn main() {
    let cli = Cli::parse();
    match cli.command {
        Command::Run(args) => {
            if let Err(failure) = execute_run(&args) {
                eprintln!("error: {}", failure.message());
                std::process::exit(failure.exit_code());
            }
        }
    }
}
