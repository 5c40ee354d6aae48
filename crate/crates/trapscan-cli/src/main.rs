mod ablate;
mod error;
mod render;
mod report;
mod scan;
mod train_demo;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use trapscan::rmt::DEFAULT_C_TW;
use trapscan::self_averaging::DEFAULT_TRIALS;
use trapscan::traps::DEFAULT_REPLICATES;

use crate::error::CliError;

/// Correlation-trap diagnostics for model checkpoints.
#[derive(Debug, Parser)]
#[command(name = "trapscan", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detect traps in every layer of one or more checkpoints.
    Scan {
        checkpoints: Vec<PathBuf>,
        #[command(flatten)]
        args: ScanArgs,
    },
    /// Trap counts across a checkpoint series, sorted by step.
    Series {
        /// Checkpoint manifests or glob patterns.
        inputs: Vec<String>,
        #[command(flatten)]
        args: ScanArgs,
    },
    /// Replace a detected trap and score the change with random probes.
    Ablate(ablate::AblateArgs),
    /// Train the synthetic MLP task and write a checkpoint series.
    TrainDemo {
        /// TOML configuration; built-in defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output directory for checkpoints, datasets and the log.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a saved JSON report as markdown.
    Report {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[arg(long, default_value_t = DEFAULT_REPLICATES)]
    pub replicates: usize,
    #[arg(long = "c-tw", default_value_t = DEFAULT_C_TW)]
    pub c_tw: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also evaluate the trap-induced mean-instability bound for every trap.
    #[arg(long)]
    pub theorem2: bool,
    /// Monte-Carlo trials per sampling scale for --theorem2.
    #[arg(long, default_value_t = DEFAULT_TRIALS)]
    pub trials: usize,
    /// Restrict to these layers (repeatable).
    #[arg(long)]
    pub layer: Vec<String>,
    /// Output format (scan: json, series: csv).
    #[arg(long, value_enum)]
    pub format: Option<Format>,
    /// Write the report here instead of stdout.
    #[arg(short, long)]
    pub output: Option<PathBuf>,
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(raw) = std::env::var("TRAPSCAN_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .map_err(|_| CliError::Usage(format!("TRAPSCAN_THREADS must be a nonnegative integer, got `{raw}`")))?;
    if threads > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    match cli.command {
        Command::Scan { checkpoints, args } => scan::run_scan(&checkpoints, &args),
        Command::Series { inputs, args } => scan::run_series(&inputs, &args),
        Command::Ablate(args) => ablate::run(&args),
        Command::TrainDemo { config, out } => train_demo::run(config.as_deref(), &out),
        Command::Report { input, output } => {
            let report = report::read_report(&input)?;
            report::emit(output.as_deref(), &render::markdown(&report))
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(error::EX_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("trapscan: {e}");
            e.exit_code()
        }
    }
}
