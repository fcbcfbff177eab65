//! `desktune`: desk-scale instruct-tuning pipeline.
//!
//! Subcommands mirror the workflow stages: synthetic data generation,
//! stratified splitting, QLoRA adapter training, ad-hoc generation,
//! anonymized judging, and report aggregation. Exit codes are stable for
//! scripting: 0 success, 1 validation error, 2 runtime failure.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use commands::CliError;
use config::{ClientKind, RunConfig};

#[derive(Parser)]
#[command(name = "desktune", version, about = "Desk-scale QLoRA instruct-tuning pipeline")]
struct Cli {
    /// Flat `key = value` config file (defaults to ./desktune.conf if present).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overwrite existing output artifacts.
    #[arg(long, global = true)]
    force: bool,
    /// Override the output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override the generator/judge client backend.
    #[arg(long, global = true, value_parser = ["stub", "http"])]
    client: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate both synthetic datasets from the topic registry.
    GenData,
    /// Stratified 80/15/5 train/val/test split of the generated datasets.
    Split,
    /// Instruct-tune LoRA adapters on the configured task.
    Train {
        /// Continue from the saved resume checkpoint.
        #[arg(long)]
        resume: bool,
        /// Override max_iters from the config.
        #[arg(long)]
        iters: Option<usize>,
    },
    /// Print a completion for an ad-hoc prompt using trained adapters.
    Generate {
        #[arg(long)]
        prompt: String,
        #[arg(long, default_value_t = 64)]
        max_new: usize,
        /// Sample with this temperature instead of greedy decoding.
        #[arg(long)]
        temperature: Option<f64>,
    },
    /// Judge candidate responses on the test split (anonymized).
    Rank,
    /// Aggregate rank sheets into a percentage table (text + JSON).
    Report {
        /// Render a RankTable JSON counts file instead of aggregating sheets.
        #[arg(long)]
        counts: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path).map_err(CliError::Validation)?,
        None => {
            let default_path = PathBuf::from("desktune.conf");
            if default_path.exists() {
                RunConfig::from_file(&default_path).map_err(CliError::Validation)?
            } else {
                RunConfig::default()
            }
        }
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Some(client) = &cli.client {
        cfg.client = match client.as_str() {
            "http" => ClientKind::Http,
            _ => ClientKind::Stub,
        };
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = load_config(&cli)?;
    match &cli.command {
        Command::GenData => commands::cmd_gen_data(&cfg, cli.force),
        Command::Split => commands::cmd_split(&cfg, cli.force),
        Command::Train { resume, iters } => {
            if let Some(iters) = iters {
                cfg.max_iters = Some(*iters);
            }
            commands::cmd_train(&cfg, cli.force, *resume)
        }
        Command::Generate {
            prompt,
            max_new,
            temperature,
        } => commands::cmd_generate(&cfg, prompt, *max_new, *temperature),
        Command::Rank => commands::cmd_rank(&cfg, cli.force),
        Command::Report { counts } => commands::cmd_report(&cfg, cli.force, counts.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version are not failures.
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
