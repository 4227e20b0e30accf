use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fixflow::cli;

/// Relaxed fixed-point flows: integrate, iterate and certify.
#[derive(Parser, Debug)]
#[command(name = "fixflow", version, about)]
struct Args {
    /// Suppress the summary on stdout
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment config and write CSV/JSON artifacts
    Run {
        config: PathBuf,

        /// Write artifacts here instead of the config's [output] dir
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Check a config without running it
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    let args = Args::parse();
    let code = match args.command {
        Command::Run { config, output_dir } => match cli::run_file(&config, output_dir.as_deref()) {
            Ok(report) => {
                if !args.quiet {
                    print!("{}", report.summary);
                    println!("artifacts: {}", report.output_dir.display());
                }
                report.exit_code()
            }
            Err(e) => {
                eprintln!("{e}");
                cli::EXIT_ERROR
            }
        },
        Command::Validate { config } => match std::fs::read_to_string(&config) {
            Ok(text) => {
                let errors = cli::validate(&text);
                if errors.is_empty() {
                    if !args.quiet {
                        println!("ok");
                    }
                    cli::EXIT_OK
                } else {
                    for e in &errors {
                        eprintln!("{e}");
                    }
                    cli::EXIT_ERROR
                }
            }
            Err(e) => {
                eprintln!("cannot read {}: {e}", config.display());
                cli::EXIT_ERROR
            }
        },
    };
    ExitCode::from(code as u8)
}
