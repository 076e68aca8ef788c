use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use riskmeta::harness::{self, HarnessError};
use riskmeta::selfcheck;

#[derive(Parser)]
#[command(name = "riskmeta", version, about = "Learned mini-batch risk functionals at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate every seed of an experiment config.
    Run {
        config: PathBuf,
        /// Expand comma-separated values into a run matrix.
        #[arg(long)]
        grid: bool,
        /// Output directory (overrides `experiment.out`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated seeds (overrides `experiment.seeds`).
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// Rebuild summary.csv and summary.txt from a run's results.csv.
    Report { dir: PathBuf },
    /// Run the built-in oracle and invariant checks.
    Check,
}

const EXIT_CONFIG: u8 = 2;
const EXIT_SEEDS_FAILED: u8 = 3;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, grid, out, seeds } => run(config, grid, out, seeds),
        Command::Report { dir } => report(dir),
        Command::Check => check(),
    }
}

fn run(config: PathBuf, grid: bool, out: Option<PathBuf>, seeds: Option<Vec<u64>>) -> ExitCode {
    let mut points = match harness::load_points(&config, grid) {
        Ok(p) => p,
        Err(e @ (HarnessError::Config(_) | HarnessError::Parse { .. })) => {
            eprintln!("{e}");
            return ExitCode::from(EXIT_CONFIG);
        }
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Some(s) = seeds {
        if s.is_empty() {
            eprintln!("invalid config:\n  --seeds: must not be empty");
            return ExitCode::from(EXIT_CONFIG);
        }
        for (_, c) in &mut points {
            c.seeds = s.clone();
        }
    }
    let out = out.unwrap_or_else(|| points[0].1.out.clone());
    match harness::run(&points, &out) {
        Ok(summary) => {
            if let Ok(text) = std::fs::read_to_string(out.join("summary.txt")) {
                print!("{text}");
            }
            if summary.failed > 0 {
                eprintln!(
                    "{} of {} runs failed; see {}",
                    summary.failed,
                    summary.rows.len(),
                    out.join("errors.txt").display()
                );
                return ExitCode::from(EXIT_SEEDS_FAILED);
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn report(dir: PathBuf) -> ExitCode {
    let result = (|| -> anyhow::Result<String> {
        let path = dir.join("results.csv");
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let entries = harness::compare_report(&harness::parse_results_csv(&text)?)?;
        let rendered = harness::summary_text(&entries);
        std::fs::write(dir.join("summary.csv"), harness::summary_csv(&entries))?;
        std::fs::write(dir.join("summary.txt"), &rendered)?;
        Ok(rendered)
    })();
    match result {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn check() -> ExitCode {
    let results = selfcheck::run_all();
    let mut ok = true;
    for r in &results {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
        ok &= r.passed;
    }
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
