//! `mmlp`: fit, backtest and interpret maximally machine-learnable
//! portfolios from a run config.

mod commands;
mod config;
mod error;
mod workspace;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Overrides, Preset};
use error::{CliError, Result};
use workspace::RunDir;

#[derive(Debug, Parser)]
#[command(name = "mmlp", version, about = "Maximally machine-learnable portfolios")]
struct Cli {
    /// Worker threads for forest fitting and bagging.
    #[arg(long, global = true, env = "MMLP_THREADS")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct RunArgs {
    /// TOML run config; unset keys come from the preset.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    seed: Option<u64>,
    /// Run directory (overrides `output_dir`).
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Override any config key, e.g. `--set mace.s_max=50`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl RunArgs {
    fn resolve(&self) -> Result<config::RunConfig> {
        config::resolve(
            self.config.as_deref(),
            &Overrides {
                preset: self.preset,
                seed: self.seed,
                output_dir: self.output.clone(),
                set: self.set.clone(),
            },
        )
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model (or a bag) on the training window.
    Fit(RunArgs),
    /// Simulate the fitted model and its benchmarks over the test window.
    Backtest(RunArgs),
    /// Forest R² of random and single-asset portfolios.
    Baseline(RunArgs),
    /// Shapley attributions and variable importance over the test window.
    Shapley(RunArgs),
    /// Render the metric tables of a backtested run.
    Report {
        /// Run directory holding `metrics.json`.
        #[arg(long)]
        run: PathBuf,
    },
    /// Write the bundled synthetic dataset and demo configs.
    Synth {
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn execute(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    }
    match cli.command {
        Command::Fit(a) => commands::fit::run(&a.resolve()?),
        Command::Backtest(a) => commands::backtest::run(&a.resolve()?),
        Command::Baseline(a) => commands::baseline::run(&a.resolve()?),
        Command::Shapley(a) => commands::shapley::run(&a.resolve()?),
        Command::Report { run } => {
            let text = commands::report::run(&RunDir::create(&run)?)?;
            print!("{text}");
            Ok(())
        }
        Command::Synth { out, seed } => commands::synth::run(&out, seed),
    }
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = format!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let text = s.to_string();
                if !msg.contains(&text) {
                    msg.push_str(&format!(": {text}"));
                }
                source = s.source();
            }
            eprintln!("{msg}");
            ExitCode::from(e.exit_code())
        }
    }
}
