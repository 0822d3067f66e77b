use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use diveq::experiment::{export_snapshot, run_experiment, ExperimentConfig, Severity};
use diveq::{Error, ErrorKind};

#[derive(Parser)]
#[command(name = "diveq", version, about = "Run vector-quantization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config and write its artifacts.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides `output_dir` in the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run with this single seed instead of the configured list.
        #[arg(long)]
        seed_override: Option<u64>,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// Check a config without running it; prints the findings as JSON.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Write a codebook checkpoint, and optionally latents, as an alignment snapshot.
    ExportSnapshot {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Latent vectors in the dataset file format.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Config => 2,
        ErrorKind::Runtime => 3,
        ErrorKind::Io => 4,
    }
}

fn execute(command: Command) -> Result<u8, Error> {
    match command {
        Command::Run {
            config,
            out,
            seed_override,
            workers,
        } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(seed) = seed_override {
                cfg = cfg.with_seed_override(seed);
            }
            for v in cfg.validate().iter().filter(|v| v.severity == Severity::Warning) {
                eprintln!("{v}");
            }
            let dir = cfg.resolve_output(out.as_deref())?;
            let summary = run_experiment(&cfg, &dir, workers)?;
            println!("{} runs written to {}", summary.runs.len(), dir.display());
            Ok(0)
        }
        Command::Validate { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = cfg.validate();
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(if report.iter().any(|v| v.severity == Severity::Error) { 2 } else { 0 })
        }
        Command::ExportSnapshot { checkpoint, data, out } => {
            export_snapshot(&checkpoint, data.as_deref(), &out)?;
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
