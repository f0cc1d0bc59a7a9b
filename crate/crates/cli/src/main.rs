//! `qmle` — simulate continuously monitored quantum systems and estimate
//! their parameters online (single pass over the measurement record) or
//! offline (batch likelihood ascent over a fixed record).
//!
//! Experiments are described in a sectioned TOML config file; flags select
//! the command and override seeds, output directory and decimation. Exit
//! status: 0 on success, 1 on configuration or I/O failure, 2 on numerical
//! failure.

mod config;
mod output;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use run::{NumericalFailure, Overrides};

#[derive(Parser)]
#[command(
    name = "qmle",
    version,
    about = "Online and offline parameter estimation for continuously monitored quantum systems"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Experiment definition (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config's seed list, e.g. `--seed 1,2,3`.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the log decimation (log every d-th step).
    #[arg(long)]
    decimation: Option<usize>,
}

#[derive(Args)]
struct FigureArgs {
    /// Which built-in protocol to run: `1a` (static truth) or `1b`
    /// (sinusoidal truth).
    which: String,
    /// Seeds to run, e.g. `--seed 1,2,3` (default: 1).
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Output directory (default: `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Log decimation (default: 100).
    #[arg(long)]
    decimation: Option<usize>,
    /// Fail on filter positivity violations instead of scrubbing.
    #[arg(long)]
    strict_positivity: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate measurement records under the configured truth.
    Simulate(CommonArgs),
    /// Run the online estimator over simulated or replayed records.
    Estimate {
        #[command(flatten)]
        common: CommonArgs,
        /// Fail on filter positivity violations instead of scrubbing.
        #[arg(long)]
        strict_positivity: bool,
    },
    /// Batch maximum-likelihood gradient ascent over a fixed record.
    OfflineMl(CommonArgs),
    /// Check recursive gradients against central finite differences.
    Gradcheck {
        /// Experiment definition (TOML).
        #[arg(long)]
        config: PathBuf,
        /// Record seeds to check (default: 0).
        #[arg(long, value_delimiter = ',')]
        seed: Option<Vec<u64>>,
    },
    /// Run a built-in example protocol end to end.
    ReproduceFigure(FigureArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help/--version land here with a zero-success kind.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(common) => {
            let cfg = config::load(&common.config)?;
            run::cmd_simulate(&cfg, &overrides(common, false))
        }
        Command::Estimate {
            common,
            strict_positivity,
        } => {
            let cfg = config::load(&common.config)?;
            run::cmd_estimate(&cfg, &overrides(common, strict_positivity), "estimate")
        }
        Command::OfflineMl(common) => {
            let cfg = config::load(&common.config)?;
            run::cmd_offline_ml(&cfg, &overrides(common, false))
        }
        Command::Gradcheck { config, seed } => {
            let cfg = config::load(&config)?;
            run::cmd_gradcheck(
                &cfg,
                &Overrides {
                    seeds: seed,
                    ..Overrides::default()
                },
            )
        }
        Command::ReproduceFigure(args) => run::cmd_reproduce_figure(
            &args.which,
            &Overrides {
                seeds: args.seed.or_else(|| Some(vec![1])),
                out: args.out,
                decimation: args.decimation,
                strict_positivity: args.strict_positivity,
            },
        ),
    }
}

fn overrides(common: CommonArgs, strict_positivity: bool) -> Overrides {
    Overrides {
        seeds: common.seed,
        out: common.out,
        decimation: common.decimation,
        strict_positivity,
    }
}

/// 2 for failures of numerical origin anywhere in the error chain, 1 for
/// everything else (configuration, validation, I/O).
fn exit_code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<NumericalFailure>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<qmle::Error>() {
            return match e {
                qmle::Error::DegenerateTrace { .. }
                | qmle::Error::DegenerateUpdate { .. }
                | qmle::Error::PositivityViolation { .. }
                | qmle::Error::NonFinite(_) => 2,
                _ => 1,
            };
        }
    }
    1
}
