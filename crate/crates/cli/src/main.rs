use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use hts_surrogate_cli::{cmd_bench, cmd_eval, cmd_generate, cmd_sweep, cmd_train, CliError, PipelineConfig, RunOptions};

/// Screening-current surrogate pipeline for REBCO solenoids.
#[derive(Debug, Parser)]
#[command(name = "hts-surrogate", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Pipeline configuration (TOML). Defaults to the built-in desk setup.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory, overriding the configuration.
    #[arg(long, global = true, env = "HTS_SURROGATE_OUT")]
    out: Option<PathBuf>,
    /// Worker threads for parallel stages.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Seed for initialization and shuffling, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Single-threaded reference mode.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Print what would run without writing anything.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Solve every configuration of the split plan and write the datasets.
    Generate,
    /// Train the configured network.
    Train {
        /// Start from the last trained weights; the architecture must match.
        #[arg(long)]
        resume: bool,
    },
    /// Train every architecture and seed of the sweep section.
    Sweep,
    /// Evaluate the trained network on every split.
    Eval,
    /// Time the solver against surrogate inference.
    Bench,
    /// Print the effective configuration as TOML.
    ShowConfig,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::desk(),
    };
    if let Some(out) = cli.out {
        config.output_dir = out;
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let jobs = if cli.deterministic { Some(1) } else { cli.jobs };
    if let Some(jobs) = jobs {
        if jobs == 0 {
            return Err(CliError::Config("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    let mut opts = RunOptions { dry_run: cli.dry_run, resume: false };
    match cli.command {
        Command::Generate => cmd_generate(&config, opts).map(drop),
        Command::Train { resume } => {
            opts.resume = resume;
            cmd_train(&config, opts).map(drop)
        }
        Command::Sweep => cmd_sweep(&config, opts).map(drop),
        Command::Eval => cmd_eval(&config, opts).map(drop),
        Command::Bench => cmd_bench(&config, opts).map(drop),
        Command::ShowConfig => {
            print!("{}", config.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
