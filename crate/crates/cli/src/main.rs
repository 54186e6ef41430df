use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tapkinn::config::{RunConfig, StageName, PRESETS};
use tapkinn::pipeline::{compare_runs, run_pipeline};
use tapkinn::{Error, Result};

/// Synthetic TAP experiments and kinetics-informed neural network fits.
#[derive(Debug, Parser)]
#[command(name = "tapkinn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the pulse train and write per-pulse CSV files.
    Simulate(RunArgs),
    /// Build the training and test datasets from simulated pulses.
    Preprocess(RunArgs),
    /// Train the KINN and write the fit report.
    Fit(RunArgs),
    /// Rebuild curves, parity tables and sensitivity estimates for a fit.
    Evaluate(RunArgs),
    /// Fit the derivative-matching baseline.
    Baseline(RunArgs),
    /// Run several stages in order (all by default).
    Run(RunArgs),
    /// Tabulate two or more fit or baseline reports side by side.
    Compare(CompareArgs),
    /// Print a preset configuration as TOML.
    Preset {
        /// One of the built-in preset names.
        name: String,
    },
}

#[derive(Debug, Args)]
struct RunArgs {
    /// Configuration file (TOML).
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset used instead of a configuration file.
    #[arg(long)]
    preset: Option<String>,
    /// Run directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the noise and initialisation seeds.
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated stages; defaults to the subcommand's own stage.
    #[arg(long, value_delimiter = ',')]
    stages: Vec<StageName>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    /// Report files (fit_report or baseline_report).
    reports: Vec<PathBuf>,
    /// Directory for comparison.csv and comparison.txt.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn load_config(args: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match (&args.config, &args.preset) {
        (Some(path), _) => RunConfig::load(path)?,
        (None, Some(name)) => RunConfig::preset(name)?,
        (None, None) => {
            return Err(Error::config("--config", format!("give --config or --preset ({})", PRESETS.join(", "))))
        }
    };
    if let Some(seed) = args.seed {
        cfg.override_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: &RunArgs, default: &[StageName]) -> Result<()> {
    let cfg = load_config(args)?;
    let stages = if args.stages.is_empty() { default } else { &args.stages };
    let dirs = run_pipeline(&cfg, &args.out, stages)?;
    for d in dirs {
        println!("{}", d.display());
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => run(&a, &[StageName::Simulate]),
        Command::Preprocess(a) => run(&a, &[StageName::Preprocess]),
        Command::Fit(a) => run(&a, &[StageName::Fit]),
        Command::Evaluate(a) => run(&a, &[StageName::Evaluate]),
        Command::Baseline(a) => run(&a, &[StageName::Baseline]),
        Command::Run(a) => run(&a, &StageName::ALL),
        Command::Compare(a) => {
            let table = compare_runs(&a.reports)?;
            table.write(&a.out)?;
            print!("{}", table.to_text());
            Ok(())
        }
        Command::Preset { name } => {
            print!("{}", RunConfig::preset(&name)?.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
