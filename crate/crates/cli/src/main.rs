//! `ssmdynlab`: experiment runner for selective state-space dynamics,
//! adapter tying and mixed-precision fine-tuning.

mod commands;
mod config;
mod error;
mod output;

use clap::{Args, Parser, Subcommand};
use config::{resolve_seed, ConfigDoc, SEED_ENV};
use error::{CliError, CliResult};
use output::{Manifest, RunDir};
use serde::Serialize;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "ssmdynlab",
    version,
    about = "Selective SSM stability, adapter tying and fine-tuning experiments"
)]
struct Cli {
    /// TOML config with one table per subcommand.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory [default: out/<subcommand>].
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Overrides the config seed and SSMDYNLAB_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for parallel library calls [default: 1].
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Config override; a bare key belongs to the subcommand's table.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Lyapunov exponents of random valid blocks.
    Lyapunov,
    /// Perturbation and precision divergence probes.
    Divergence,
    /// Parallel vs sequential scan: agreement and wall time.
    ScanBench,
    /// Train the toy model, or compare full and adapter fine-tuning.
    Train(TrainArgs),
    /// Check that a checkpoint's fused-buffer adapter shares one left factor.
    LoraVerify {
        /// Checkpoint with adapters; overrides `lora-verify.checkpoint`.
        checkpoint: Option<PathBuf>,
    },
    /// Combine the reports of earlier runs.
    Report {
        /// Run directories; overrides `report.runs`.
        runs: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Named configuration, e.g. `toy`, `toy-lora`, `table3-small`.
    #[arg(long)]
    preset: Option<String>,
    /// Run full fine-tuning and adapter fine-tuning from the same init and
    /// report their throughput and memory side by side.
    #[arg(long)]
    compare: bool,
    /// With --compare: fail when adapter training is not at least as fast.
    #[arg(long, requires = "compare")]
    require_faster: bool,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Lyapunov => "lyapunov",
            Command::Divergence => "divergence",
            Command::ScanBench => "scan-bench",
            Command::Train(_) => "train",
            Command::LoraVerify { .. } => "lora-verify",
            Command::Report { .. } => "report",
        }
    }
}

/// Resolved run settings shared by every subcommand.
#[derive(Debug)]
pub struct RunContext {
    pub doc: ConfigDoc,
    pub subcommand: &'static str,
    pub seed: u64,
    pub workers: usize,
    pub out: PathBuf,
    pub config_path: Option<PathBuf>,
    pub overrides: Vec<String>,
}

impl RunContext {
    /// Lock the output directory and write the manifest.
    pub fn start<C: Serialize>(&self, config: &C) -> CliResult<RunDir> {
        let dir = RunDir::acquire(&self.out)?;
        dir.write_json(
            "manifest.json",
            &Manifest {
                subcommand: self.subcommand,
                library_version: ssmdynlab::VERSION,
                seed: self.seed,
                workers: self.workers,
                config_path: self.config_path.as_ref().map(|p| p.display().to_string()),
                overrides: &self.overrides,
                config,
            },
        )?;
        Ok(dir)
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let subcommand = cli.command.name();
    let mut doc = ConfigDoc::load(cli.config.as_deref())?;
    for o in &cli.overrides {
        doc.apply_override(o, subcommand)?;
    }
    let seed = resolve_seed(cli.seed, &doc, std::env::var(SEED_ENV).ok())?;
    let workers = match cli.workers {
        Some(w) => w,
        None => doc.top_u64("workers")?.map_or(1, |w| w as usize),
    };
    if workers == 0 {
        return Err(CliError::config("workers must be at least 1"));
    }
    let ctx = RunContext {
        doc,
        subcommand,
        seed,
        workers,
        out: cli.out.unwrap_or_else(|| PathBuf::from("out").join(subcommand)),
        config_path: cli.config,
        overrides: cli.overrides,
    };
    let command = cli.command;
    ssmdynlab::ssm::with_workers(workers, move || match command {
        Command::Lyapunov => commands::lyapunov::run(&ctx),
        Command::Divergence => commands::divergence::run(&ctx),
        Command::ScanBench => commands::scan_bench::run(&ctx),
        Command::Train(args) => commands::train::run(&ctx, &args),
        Command::LoraVerify { checkpoint } => commands::lora_verify::run(&ctx, checkpoint),
        Command::Report { runs } => commands::report::run(&ctx, runs),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            // clap's message minus the usage block, folded onto one line
            let msg = e.to_string();
            let body: Vec<&str> = msg
                .lines()
                .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect();
            let err = CliError::Usage(body.join(" ").trim_start_matches("error: ").to_string());
            eprintln!("{}", err.line());
            return ExitCode::from(err.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.line());
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
