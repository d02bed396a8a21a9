use std::process::ExitCode;

use clap::Parser;
use tracing::Level;
use vhgm_cli::{run, Cli, CliError};

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", CliError::validation(e.render().to_string().trim()).to_json("vhgm"));
            return ExitCode::from(vhgm_cli::EXIT_VALIDATION as u8);
        }
    };
    let level = match cli.verbose {
        0 => Level::WARN,
        1 => Level::INFO,
        _ => Level::DEBUG,
    };
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    let command = cli.command.name();
    match run(cli) {
        Ok(msg) => {
            println!("{msg}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", e.to_json(command));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
