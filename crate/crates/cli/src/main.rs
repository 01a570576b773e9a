use std::process::ExitCode;

use clap::Parser;
use mosc_cli::{run, Cli, CliError};

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            let err = CliError::config(format!("--threads: {e}"));
            eprint!("{}", err.to_json());
            return ExitCode::from(err.exit_code() as u8);
        }
    }
    let env: Vec<(String, String)> = std::env::vars().collect();
    match run(cli.command, cli.config.as_deref(), &cli.out, &env) {
        Ok(files) => {
            println!("{}: wrote {} files to {}", cli.command.name(), files.len(), cli.out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprint!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
