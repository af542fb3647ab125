use std::process::ExitCode;

use clap::Parser;
use hyperpeft_cli::{execute, CliError, Cli};

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(&cli.command) {
        Ok(Some(run)) => {
            println!("{}", run.manifest_path.display());
            ExitCode::SUCCESS
        }
        Ok(None) => ExitCode::SUCCESS,
        Err(e) => {
            match &e {
                CliError::Core(hyperpeft::Error::Config { path, msg }) => eprintln!("config error at {path}: {msg}"),
                CliError::Core(hyperpeft::Error::NonFiniteLoss { step, window }) => {
                    eprintln!("non-finite loss at step {step} (window {window})")
                }
                e => eprintln!("error: {e}"),
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
