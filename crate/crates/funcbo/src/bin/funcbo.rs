//! Command-line front end: execute runs, generate datasets, run the
//! acceptance suites, sweep config grids, and tabulate finished runs.
//!
//! Exit codes: 0 success, 1 run failure, 2 config error, 3 acceptance
//! failure. All diagnostics go to stderr; data (tables, CSV) to stdout.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use funcbo::harness::{self, checks, compare};
use funcbo::Error;

#[derive(Parser)]
#[command(
    name = "funcbo",
    version,
    about = "Functional bilevel optimization toolkit"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Execute one run described by a config file and write its artifacts.
    Run {
        /// Path to a `key = value` config file.
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a benchmark dataset file.
    GenData {
        /// Task name: iv, rl_toy, or quad.
        #[arg(long)]
        task: String,
        /// Number of samples (transitions for rl_toy).
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        /// Output file path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the acceptance suite and print one pass/fail line per criterion.
    Check {
        /// Which suite: "quick" (micro-suite plus identity checks) or "full".
        #[arg(long, default_value = "full")]
        suite: String,
    },
    /// Run the cartesian product of a config file and a grid file.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// Grid file: one `section.key = v1 v2 ...` axis per line.
        #[arg(long)]
        grid: PathBuf,
        /// Root directory for the per-point run directories.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate one final metric across finished run directories.
    Compare {
        /// Metric name as it appears in each run's summary.
        #[arg(long)]
        metric: String,
        /// Run directories (each containing a summary.json).
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

const EXIT_RUN_FAILURE: u8 = 1;
const EXIT_CONFIG_ERROR: u8 = 2;
const EXIT_ACCEPTANCE_FAILURE: u8 = 3;

fn fail(code: u8, err: &dyn std::fmt::Display) -> ExitCode {
    eprintln!("error: {err}");
    ExitCode::from(code)
}

fn cmd_run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> ExitCode {
    let mut cfg = match harness::load_config(config) {
        Ok(c) => c,
        Err(e) => return fail(EXIT_CONFIG_ERROR, &e),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out_dir = Some(o);
    }
    let out_dir = cfg.out_dir.clone().unwrap_or_else(|| {
        PathBuf::from(format!(
            "runs/{}_{}_seed{}",
            cfg.task.name(),
            cfg.method.name(),
            cfg.seed
        ))
    });
    match harness::run_to_dir(&cfg, &out_dir) {
        Ok(()) => {
            eprintln!("run complete: {}", out_dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_RUN_FAILURE, &e),
    }
}

fn cmd_gen_data(task: &str, n: usize, seed: u64, out: &Path) -> ExitCode {
    let task = match harness::Task::parse(task) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG_ERROR, &e),
    };
    match harness::gen_data(task, n, seed, out) {
        Ok(()) => {
            eprintln!("dataset written: {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_RUN_FAILURE, &e),
    }
}

fn cmd_check(suite: &str) -> ExitCode {
    let quick = match suite {
        "quick" => true,
        "full" => false,
        other => {
            return fail(
                EXIT_CONFIG_ERROR,
                &format!("unknown suite '{other}' (expected quick or full)"),
            )
        }
    };
    let results = checks::run_suite(quick);
    print!("{}", checks::format_results(&results));
    if results.iter().all(|r| r.pass) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(EXIT_ACCEPTANCE_FAILURE)
    }
}

fn cmd_sweep(config: &Path, grid: &Path, out: Option<PathBuf>) -> ExitCode {
    let text = match std::fs::read_to_string(config) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG_ERROR, &e),
    };
    let base = match harness::parse_pairs(&text) {
        Ok(p) => p,
        Err(e) => return fail(EXIT_CONFIG_ERROR, &e),
    };
    let grid_text = match std::fs::read_to_string(grid) {
        Ok(t) => t,
        Err(e) => return fail(EXIT_CONFIG_ERROR, &e),
    };
    let out_root = out
        .or_else(|| base.get("run.out_dir").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("sweep_out"));
    match harness::sweep(&base, &grid_text, &out_root) {
        Ok((succeeded, failures)) if failures.is_empty() => {
            eprintln!("sweep complete: {succeeded} runs under {}", out_root.display());
            ExitCode::SUCCESS
        }
        Ok((succeeded, failures)) => {
            for f in &failures {
                eprintln!("error: {f}");
            }
            eprintln!(
                "sweep finished with {} failures ({succeeded} succeeded)",
                failures.len()
            );
            ExitCode::from(EXIT_RUN_FAILURE)
        }
        // every grid point is validated before any run starts, so a config
        // error here means the grid or base file is bad
        Err(e @ Error::Config(_)) => fail(EXIT_CONFIG_ERROR, &e),
        Err(e) => fail(EXIT_RUN_FAILURE, &e),
    }
}

fn cmd_compare(metric: &str, dirs: &[PathBuf]) -> ExitCode {
    let refs: Vec<&Path> = dirs.iter().map(PathBuf::as_path).collect();
    match compare::emit_comparison(&refs, metric) {
        Ok((csv, skipped)) => {
            for s in skipped {
                eprintln!("warning: skipped {s}");
            }
            print!("{csv}");
            ExitCode::SUCCESS
        }
        Err(e) => fail(EXIT_RUN_FAILURE, &e),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { config, seed, out } => cmd_run(&config, seed, out),
        Cmd::GenData { task, n, seed, out } => cmd_gen_data(&task, n, seed, &out),
        Cmd::Check { suite } => cmd_check(&suite),
        Cmd::Sweep { config, grid, out } => cmd_sweep(&config, &grid, out),
        Cmd::Compare { metric, dirs } => cmd_compare(&metric, &dirs),
    }
}
