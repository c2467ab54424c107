use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

/// Failure classes with their process exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments or input files (exit 2).
    Input(String),
    /// An internal invariant broke (exit 3).
    Invariant(String),
}

impl CliError {
    pub fn input(e: impl std::fmt::Display) -> Self {
        CliError::Input(e.to_string())
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::Invariant(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "error: {m}"),
            CliError::Invariant(m) => write!(f, "internal invariant violated: {m}"),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "loratune",
    version,
    about = "Multi-adapter LoRA tuning orchestration"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Method {
    Exact,
    Sjf,
    Oracle,
}

#[derive(Subcommand)]
enum Command {
    /// Run the cluster simulator on a workload.
    Simulate {
        #[arg(long)]
        workload: PathBuf,
        #[arg(long)]
        cluster: PathBuf,
        /// Comma-separated subset of b, s, ee.
        #[arg(long, default_value = "b,s,ee")]
        flags: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Run all four policy combinations and write their ratios.
        #[arg(long)]
        ablate: bool,
    },
    /// Solve a makespan instance.
    Schedule {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_enum, default_value = "exact")]
        method: Method,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Replay the online exit detector over a loss trace.
    Detect {
        #[arg(long)]
        trace: PathBuf,
        #[command(flatten)]
        detector: commands::DetectorArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Warmup-ranking reliability over a directory of full traces.
    AnalyzeWarmup {
        #[arg(long)]
        traces: PathBuf,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "0.01,0.02,0.05,0.1,0.2,0.3,0.5"
        )]
        fractions: Vec<f64>,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify grouped adapter math against naive and finite-difference oracles.
    GemmCheck {
        #[command(flatten)]
        args: commands::GemmArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Simulate {
            workload,
            cluster,
            flags,
            seed,
            out,
            ablate,
        } => commands::simulate(&workload, &cluster, &flags, seed, &out, ablate),
        Command::Schedule {
            instance,
            method,
            out,
        } => commands::schedule(&instance, method, out.as_deref()),
        Command::Detect {
            trace,
            detector,
            out,
        } => commands::detect(&trace, &detector, out.as_deref()),
        Command::AnalyzeWarmup {
            traces,
            fractions,
            alpha,
            out,
        } => commands::analyze_warmup(&traces, &fractions, alpha, out.as_deref()),
        Command::GemmCheck { args, out } => commands::gemm_check(&args, out.as_deref()),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.code())
        }
    }
}
