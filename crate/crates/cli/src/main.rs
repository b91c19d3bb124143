use std::path::PathBuf;
use std::process::ExitCode;

use brhier::{runner, summary, CliError, ExperimentConfig};
use clap::{Parser, Subcommand};

/// Bounded-rational decision hierarchies: tabular sweeps, supervised
/// specialization and on-line control experiments.
#[derive(Parser)]
#[command(name = "brhier", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a JSON config.
    Run {
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
    /// Continue a run from its checkpoint.
    Resume {
        checkpoint: PathBuf,
        #[arg(long)]
        iters: usize,
    },
    /// Report a finished run and check its thresholds.
    Summarize { dir: PathBuf },
}

fn execute(cli: Cli) -> Result<bool, CliError> {
    match cli.command {
        Command::Run { config, seed, output_dir } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed {
                cfg.set_seed(seed);
            }
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            runner::run(&cfg)?;
            eprintln!("artifacts written to {}", cfg.output_dir.display());
            Ok(true)
        }
        Command::Resume { checkpoint, iters } => {
            runner::resume(&checkpoint, iters)?;
            Ok(true)
        }
        Command::Summarize { dir } => {
            let s = summary::write_summary(&dir)?;
            print!("{}", summary::report(&s));
            Ok(s.pass)
        }
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
