//! Experiment subcommands with deterministic seeding, CSV output and a JSON run summary.
//!
//! Each subcommand writes `<name>.csv` (plus any auxiliary CSVs) and
//! `<name>_summary.json` into the output directory. Grid points run on a
//! bounded worker pool and are merged in config order, so output bytes do not
//! depend on the worker count.

mod bias;
pub mod config;
mod degeneracy;
mod gradcheck;
mod output;
mod transitivity;

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;

use crate::error::{Error, Result};

pub use bias::{bias_sweep, edpo_rm_dist, BiasSweepResult, EdpoRmDistResult, MethodSelection, SweepRun};
pub use config::{ExperimentConfig, GradLoss, Method};
pub use degeneracy::{degeneracy, DegeneracyResult, MethodTrajectory};
pub use gradcheck::{gradcheck, GradcheckResult, GradcheckRow};
pub use output::{fmt_f64, CsvTable};
pub use transitivity::{transitivity, TransitivityResult, TransitivityRow};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILED: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Gradcheck,
    Degeneracy,
    Transitivity,
    BiasSweep,
    EdpoRmDist,
}

impl Command {
    pub const ALL: [Command; 5] = [Command::Gradcheck, Command::Degeneracy, Command::Transitivity, Command::BiasSweep, Command::EdpoRmDist];

    pub fn name(self) -> &'static str {
        match self {
            Command::Gradcheck => "gradcheck",
            Command::Degeneracy => "degeneracy",
            Command::Transitivity => "transitivity",
            Command::BiasSweep => "bias-sweep",
            Command::EdpoRmDist => "edpo-rm-dist",
        }
    }

    /// Stem of the output files.
    pub fn file_stem(self) -> String {
        self.name().replace('-', "_")
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| Error::Config(format!("unknown subcommand {s}")))
    }
}

/// One pass/fail criterion of a run.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, passed: bool, detail: impl Into<String>) -> Self {
        Self { name: name.into(), passed, detail: detail.into() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunOptions {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub workers: usize,
}

impl RunOptions {
    /// Command-line values take precedence over the config file. Seed and output
    /// directory must come from one of the two.
    pub fn resolve(cfg: &ExperimentConfig, seed: Option<u64>, out_dir: Option<PathBuf>, workers: Option<usize>) -> Result<Self> {
        let seed = seed.or(cfg.seed).ok_or_else(|| Error::Config("no seed given on the command line or in the config".into()))?;
        let out_dir = out_dir
            .or_else(|| cfg.out_dir.clone())
            .ok_or_else(|| Error::Config("no output directory given on the command line or in the config".into()))?;
        let workers = workers.or(cfg.workers).unwrap_or(1);
        if workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        Ok(Self { seed, out_dir, workers })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub command: Command,
    pub checks: Vec<Check>,
    pub outputs: Vec<PathBuf>,
}

impl RunReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn exit_code(&self) -> i32 {
        if self.passed() {
            EXIT_PASS
        } else {
            EXIT_CHECK_FAILED
        }
    }
}

#[derive(Serialize)]
struct Versions {
    prefopt: &'static str,
    summary_format: u32,
}

#[derive(Serialize)]
struct Summary<'a> {
    command: &'static str,
    seed: u64,
    workers: usize,
    versions: Versions,
    config: &'a ExperimentConfig,
    passed: bool,
    checks: &'a [Check],
    outputs: Vec<String>,
}

/// Runs one subcommand and writes its CSVs and summary JSON.
pub fn run(command: Command, cfg: &ExperimentConfig, opts: &RunOptions) -> Result<RunReport> {
    let mut echo = cfg.clone();
    echo.seed = Some(opts.seed);
    echo.out_dir = Some(opts.out_dir.clone());
    echo.workers = Some(opts.workers);
    let (tables, checks) = match command {
        Command::Gradcheck => {
            let r = gradcheck(&cfg.gradcheck, opts.seed, opts.workers)?;
            (vec![("gradcheck".to_string(), r.table())], r.checks)
        }
        Command::Degeneracy => {
            let r = degeneracy(&cfg.degeneracy, opts.workers)?;
            (vec![("degeneracy".to_string(), r.table())], r.checks)
        }
        Command::Transitivity => {
            let r = transitivity(&cfg.transitivity, opts.workers)?;
            (vec![("transitivity".to_string(), r.table())], r.checks)
        }
        Command::BiasSweep => {
            let r = bias_sweep(&cfg.bias_sweep, opts.seed, opts.workers)?;
            (vec![("bias_sweep".to_string(), r.runs_table()), ("bias_sweep_selected".to_string(), r.selected_table())], r.checks)
        }
        Command::EdpoRmDist => {
            let r = edpo_rm_dist(&cfg.edpo_rm_dist, opts.seed, opts.workers)?;
            (vec![("edpo_rm_dist".to_string(), r.table())], r.checks)
        }
    };
    std::fs::create_dir_all(&opts.out_dir).map_err(|source| Error::Io { path: opts.out_dir.clone(), source })?;
    let mut outputs = Vec::new();
    for (stem, table) in &tables {
        let path = opts.out_dir.join(format!("{stem}.csv"));
        table.write(&path)?;
        outputs.push(path);
    }
    let summary_path = opts.out_dir.join(format!("{}_summary.json", command.file_stem()));
    let summary = Summary {
        command: command.name(),
        seed: opts.seed,
        workers: opts.workers,
        versions: Versions { prefopt: env!("CARGO_PKG_VERSION"), summary_format: 1 },
        config: &echo,
        passed: checks.iter().all(|c| c.passed),
        checks: &checks,
        outputs: outputs.iter().map(|p| file_name(p)).collect(),
    };
    let mut text = serde_json::to_string_pretty(&summary)?;
    text.push('\n');
    std::fs::write(&summary_path, text).map_err(|source| Error::Io { path: summary_path.clone(), source })?;
    outputs.push(summary_path);
    Ok(RunReport { command, checks, outputs })
}

fn file_name(p: &Path) -> String {
    p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

/// Derived stream seed; distinct `(seed, stream)` give unrelated values.
pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(seed ^ mix(stream))
}

/// Maps `f` over `items` on at most `workers` threads, keeping input order.
pub(crate) fn par_map<T, U, F>(items: &[T], workers: usize, f: F) -> Result<Vec<U>>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> Result<U> + Sync + Send,
{
    use rayon::prelude::*;
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| items.par_iter().map(f).collect::<Vec<_>>()).into_iter().collect()
}
