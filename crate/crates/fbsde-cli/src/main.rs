//! `fbsde solve <config> [--seed S] [--out PATH] [--threads K]`
//!
//! Runs one solver job described by a TOML config and writes a CSV report.
//! Exit codes: 0 success, 2 config error, 3 i/o error, 4 solver error,
//! 5 comparison/crosscheck violation. Identical configs (including seed)
//! produce byte-identical CSV output regardless of `--threads`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fbsde_cli::{config, jobs, CliError, VIOLATION_EXIT};

#[derive(Parser)]
#[command(name = "fbsde", about = "Monte Carlo solver for coupled parabolic PDE systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the job described by a TOML config file.
    Solve {
        /// Path to the config file.
        config: PathBuf,
        /// Override the solver seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output CSV path from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Worker thread count (default: FBSDE_THREADS or all cores).
        #[arg(long)]
        threads: Option<usize>,
    },
}

fn thread_count(flag: Option<usize>) -> Option<usize> {
    flag.or_else(|| {
        std::env::var("FBSDE_THREADS")
            .ok()
            .and_then(|v| v.parse().ok())
    })
}

fn run_solve(
    config_path: PathBuf,
    seed: Option<u64>,
    out: Option<PathBuf>,
    threads: Option<usize>,
) -> Result<bool, CliError> {
    let text = std::fs::read_to_string(&config_path)?;
    let run_config = config::parse_config(&text)?;

    let output = match thread_count(threads) {
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
            pool.install(|| jobs::run(&run_config, seed))?
        }
        None => jobs::run(&run_config, seed)?,
    };

    let out_path = out
        .or_else(|| run_config.output.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(format!("{}.csv", run_config.job.as_str())));
    std::fs::write(&out_path, output.csv.as_bytes())?;

    for warning in &output.warnings {
        eprintln!("{warning}");
    }
    println!("{}", output.summary);
    Ok(output.violation)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Solve {
            config,
            seed,
            out,
            threads,
        } => match run_solve(config, seed, out, threads) {
            Ok(false) => ExitCode::SUCCESS,
            Ok(true) => ExitCode::from(VIOLATION_EXIT),
            Err(err) => {
                eprintln!("error: {err}");
                ExitCode::from(err.exit_code())
            }
        },
    }
}
