use std::error::Error;
use std::process::ExitCode;

use clap::Parser;
use kpdet_cli::{init_workers, run, Cli, CliError, EXIT_OK, EXIT_USAGE};

fn report(e: &CliError) {
    let mut shown = e.to_string();
    eprintln!("error: {shown}");
    let mut source = e.source();
    while let Some(s) = source {
        let text = s.to_string();
        if !shown.contains(&text) {
            eprintln!("  caused by: {text}");
        }
        shown = text;
        source = s.source();
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE as u8 } else { EXIT_OK as u8 });
        }
    };
    let result = init_workers().and_then(|_| run(&cli.command));
    match result {
        Ok(manifest) => {
            eprintln!("{}: outputs {}", manifest.command, manifest.outputs_digest());
            ExitCode::SUCCESS
        }
        Err(e) => {
            report(&e);
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
