//! Command-line runner. Exit codes: 0 success, 1 runtime failure, 2 invalid
//! configuration or missing inputs (nothing written), 3 too many skipped benchmark rows.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use crossfit_bridge::experiment::{
    run_benchmark, run_diagnostics, run_policy_value, ExperimentConfig, RunOptions, Task, MAX_SKIPPED_FRACTION,
};
use crossfit_bridge::Error;

#[derive(Parser, Debug)]
#[command(version, about = "Cross-fitted kernel bridge estimation: benchmark, diagnostics and policy value")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides master_seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides output_dir.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (outputs do not depend on it).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Also write one logged dataset with its hidden states to episodes.jsonl.
    #[arg(long, global = true)]
    debug_latents: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Split versus cross-fit MSE over the sample-size grid.
    Benchmark,
    /// Monte Carlo checks of the risk decomposition.
    Diagnostics,
    /// Value of a policy from fitted, exact or stored bridges.
    PolicyValue,
}

enum Failure {
    Config(String),
    Runtime(String),
    Skipped(f64),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_config() {
            Failure::Config(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)?,
        None => ExperimentConfig::default(),
    };
    cfg.task = match cli.command {
        Command::Benchmark => Task::Benchmark,
        Command::Diagnostics => Task::Diagnostics,
        Command::PolicyValue => Task::PolicyValue,
    };
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    let opts = RunOptions { debug_latents: cli.debug_latents };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(Failure::Config("--threads must be positive".into()));
        }
        pool = pool.num_threads(t);
    }
    let pool = pool.build().map_err(|e| Failure::Runtime(e.to_string()))?;
    pool.install(|| -> Result<(), Failure> {
        match cfg.task {
            Task::Benchmark => {
                let out = run_benchmark(&cfg, &opts)?;
                out.write(&cfg.output_dir)?;
                let frac = out.skipped_fraction();
                if frac > MAX_SKIPPED_FRACTION {
                    return Err(Failure::Skipped(frac));
                }
            }
            Task::Diagnostics => run_diagnostics(&cfg, &opts)?.write(&cfg.output_dir)?,
            Task::PolicyValue => run_policy_value(&cfg, &opts)?.write(&cfg.output_dir)?,
        }
        Ok(())
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Skipped(frac)) => {
            eprintln!(
                "error: {:.0}% of benchmark rows were skipped (limit {:.0}%)",
                100.0 * frac,
                100.0 * MAX_SKIPPED_FRACTION
            );
            ExitCode::from(3)
        }
    }
}
