//! `qsep`: simulate filters, run the verification suites, solve the
//! dynamic program and compare control strategies.
//!
//! Exit codes: `0` success, `1` a check failed, `2` usage or config error.

mod commands;
mod config;
mod manifest;
mod strategy;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use commands::{Check, CompareArgs, Context, SimulateArgs, VerifyArgs, DEFAULT_PANEL};
use manifest::{Outputs, RunManifest, MANIFEST_FILE};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Run(String),
}

impl From<qsep_core::Error> for CliError {
    fn from(e: qsep_core::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

#[derive(Parser)]
#[command(name = "qsep", version, about = "Controlled quantum filtering toolkit")]
struct Cli {
    /// Worker threads for parallel sections.
    #[arg(long, global = true, env = "QSEP_JOBS")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration.
    config: PathBuf,
    /// Override a config entry, e.g. `--set run.dt=1e-3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Override `run.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate filter trajectories and summarize the ensemble.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// zero | max | min | const:U | bang_bang[:W] | randomized[:SALT] | separated
        #[arg(long, default_value = "zero")]
        strategy: String,
        /// Value function directory for the `separated` strategy.
        #[arg(long)]
        value_function: Option<PathBuf>,
        /// Number of trajectories written as CSV.
        #[arg(long, default_value_t = 10)]
        save: usize,
        /// Time stride of the ensemble summary.
        #[arg(long, default_value_t = 10)]
        stride: usize,
    },
    /// Run one verification suite; exit 1 if it fails.
    Verify {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        check: Check,
        #[arg(long, default_value = "bang_bang")]
        strategy: String,
        /// Seeds for the refinement checks (`ks`, `oracle`).
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Solve the dynamic program and check its HJB residuals.
    Bellman {
        #[command(flatten)]
        common: Common,
    },
    /// Compare the separated policy against a strategy panel.
    Compare {
        #[command(flatten)]
        common: Common,
        /// Comma-separated strategy specs.
        #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_PANEL.map(String::from))]
        panel: Vec<String>,
        /// Reuse a solved value function instead of solving.
        #[arg(long)]
        value_function: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let arguments: Vec<String> = std::env::args().skip(1).collect();
    match run(cli, arguments) {
        Ok(code) => ExitCode::from(code),
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn run(cli: Cli, arguments: Vec<String>) -> Result<u8, CliError> {
    if let Some(j) = cli.jobs {
        if j == 0 {
            return Err(CliError::Usage("--jobs must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build_global()
            .map_err(|e| CliError::Run(e.to_string()))?;
    }
    let (name, common) = match &cli.command {
        Command::Simulate { common, .. } => ("simulate", common),
        Command::Verify { common, .. } => ("verify", common),
        Command::Bellman { common } => ("bellman", common),
        Command::Compare { common, .. } => ("compare", common),
    };
    let started = manifest::now();
    let (cfg, hash) = config::load(&common.config, &common.set, common.seed)?;
    let mut ctx = Context {
        cfg,
        hash,
        out: Outputs::new(&common.out)?,
    };
    let failing = match &cli.command {
        Command::Simulate {
            strategy,
            value_function,
            save,
            stride,
            ..
        } => commands::simulate(
            &mut ctx,
            &SimulateArgs {
                strategy: strategy.clone(),
                value_function: value_function.clone(),
                save: *save,
                stride: *stride,
            },
        )?,
        Command::Verify {
            check,
            strategy,
            seeds,
            ..
        } => commands::verify(
            &mut ctx,
            &VerifyArgs {
                check: *check,
                strategy: strategy.clone(),
                seeds: *seeds,
            },
        )?,
        Command::Bellman { .. } => commands::bellman(&mut ctx)?,
        Command::Compare {
            panel,
            value_function,
            ..
        } => commands::compare(
            &mut ctx,
            &CompareArgs {
                panel: panel.clone(),
                value_function: value_function.clone(),
            },
        )?,
    };
    let code = if failing.is_empty() { 0 } else { 1 };
    let m = RunManifest {
        command: name.into(),
        arguments,
        config_hash: ctx.hash.clone(),
        tool_version: env!("CARGO_PKG_VERSION").into(),
        seed: ctx.cfg.run.seed,
        started,
        finished: manifest::now(),
        exit_code: code as i32,
        outputs: ctx.out.inventory()?,
    };
    let text = serde_json::to_string_pretty(&m).map_err(|e| CliError::Run(e.to_string()))?;
    std::fs::write(ctx.out.root().join(MANIFEST_FILE), text + "\n")?;
    if failing.is_empty() {
        println!("{name}: ok ({})", ctx.out.root().display());
    } else {
        println!("{name}: FAILED {}", failing.join(", "));
    }
    Ok(code)
}
