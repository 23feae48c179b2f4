use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};
use prefopt::harness::{self, Command, ExperimentConfig, RunOptions, EXIT_USAGE};

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Sub {
    Gradcheck,
    Degeneracy,
    Transitivity,
    BiasSweep,
    EdpoRmDist,
}

impl From<Sub> for Command {
    fn from(s: Sub) -> Self {
        match s {
            Sub::Gradcheck => Command::Gradcheck,
            Sub::Degeneracy => Command::Degeneracy,
            Sub::Transitivity => Command::Transitivity,
            Sub::BiasSweep => Command::BiasSweep,
            Sub::EdpoRmDist => Command::EdpoRmDist,
        }
    }
}

/// Run a preference-optimization experiment and write CSV results plus a JSON summary.
///
/// Exit status: 0 all checks passed, 1 a check failed, 2 usage or configuration error.
#[derive(Debug, Parser)]
#[command(name = "prefopt", version)]
struct Cli {
    #[arg(value_enum)]
    command: Sub,
    /// Strict JSON config; unknown keys are rejected.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let command: Command = cli.command.into();
    let result = ExperimentConfig::from_path(&cli.config).and_then(|cfg| {
        let opts = RunOptions::resolve(&cfg, cli.seed, cli.out_dir, cli.workers)?;
        harness::run(command, &cfg, &opts)
    });
    match result {
        Ok(report) => {
            for c in &report.checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            for p in &report.outputs {
                println!("wrote {}", p.display());
            }
            ExitCode::from(report.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("prefopt {}: {e}", command.name());
            ExitCode::from(EXIT_USAGE as u8)
        }
    }
}
