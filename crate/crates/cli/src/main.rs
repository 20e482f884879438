//! Command-line front end.
//!
//! Subcommands: `analytic` (closed-form tables), `montecarlo` (simulation
//! protocols), `realdata` (tabular width sweep), `validate` (self-checks).
//! Experiment commands read a TOML config, write one CSV plus a manifest,
//! and are bit-reproducible for a fixed seed regardless of `--threads`.
//!
//! Exit codes: 0 success, 1 validation failure, 2 config error, 3 I/O error.

mod commands;
mod config;
mod csvio;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::CommandContext;
use config::Config;
use error::CliError;

#[derive(Parser)]
#[command(name = "misspec", version, about = "Estimation lab for misspecified linear models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker thread cap (0 = runtime default).
    #[arg(long)]
    threads: Option<usize>,
    /// Output CSV path (defaults to the config's `output`, then to
    /// `<command>.csv`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Reduced draw counts where supported (validate only).
    #[arg(long)]
    quick: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Closed-form expected MSE over a parameter grid.
    Analytic(RunArgs),
    /// Simulation protocols with analytic pairing.
    Montecarlo(RunArgs),
    /// Width sweep over a features/response CSV.
    Realdata {
        #[command(flatten)]
        args: RunArgs,
        /// Input data file (comma-delimited, header row).
        csv: PathBuf,
    },
    /// Run the identity and oracle self-checks.
    Validate {
        /// Override the default validation seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker thread cap (0 = runtime default).
        #[arg(long)]
        threads: Option<usize>,
        /// Reduced draw counts, looser tolerances, under ten seconds.
        #[arg(long)]
        quick: bool,
    },
}

fn make_context(args: &RunArgs, default_out: &str) -> Result<CommandContext, CliError> {
    let mut config = Config::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.master_seed = seed;
    }
    if let Some(threads) = args.threads {
        config.threads = threads;
    }
    let out_path = args
        .out
        .clone()
        .or_else(|| config.output.clone().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(default_out));
    Ok(CommandContext {
        threads: config.threads,
        quick: args.quick,
        out_path,
        config,
    })
}

/// Run `f` under a thread pool of the requested size (0 = default pool).
fn with_pool<F: FnOnce() -> Result<(), CliError> + Send>(
    threads: usize,
    f: F,
) -> Result<(), CliError> {
    if threads == 0 {
        return f();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Config(format!("thread pool: {e}")))?;
    pool.install(f)
}

fn run() -> Result<(), CliError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Analytic(args) => {
            let ctx = make_context(&args, "analytic.csv")?;
            with_pool(ctx.threads, || commands::cmd_analytic(&ctx))
        }
        Command::Montecarlo(args) => {
            let ctx = make_context(&args, "montecarlo.csv")?;
            with_pool(ctx.threads, || commands::cmd_montecarlo(&ctx))
        }
        Command::Realdata { args, csv } => {
            let ctx = make_context(&args, "realdata.csv")?;
            with_pool(ctx.threads, || commands::cmd_realdata(&ctx, &csv))
        }
        Command::Validate {
            seed,
            threads,
            quick,
        } => with_pool(threads.unwrap_or(0), || commands::cmd_validate(seed, quick)),
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
