//! Command-line front end of `psla-core`: timing sweeps, gradient checks,
//! parameter ledgers, demo dumps and neighborhood dumps.

pub mod bench;
pub mod demo;
pub mod error;
pub mod gradcheck;

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use psla_core::config::{GridConfig, RunConfig};
use psla_core::neighborhood::NeighborhoodSpec;
use psla_core::nets::ParamLedger;
use psla_core::pipeline::PropagationModel;
use rand::SeedableRng;

pub use error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "psla", version, about = "Sparse local attention feature propagation: benchmarks and checks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Time the attention stage and whole frames over a config grid; writes CSV and JSON.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Output stem; `.csv` and `.json` are written next to each other.
        #[arg(long, default_value = "psla-bench")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = bench::DEFAULT_REPEAT)]
        repeat: usize,
    },
    /// Central-difference checks of every differentiable operator.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write the table as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Adds a check with a wrong backward; the run must then fail.
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Parameter counts of the propagation machinery.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump tensors and stats of one synthetic run.
    Demo {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a neighborhood spec as JSON.
    DumpNeighborhood {
        #[arg(long)]
        d: usize,
        /// The full (2d+1)^2 window instead of the progressive one.
        #[arg(long)]
        dense: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn grid(path: Option<&Path>) -> Result<GridConfig> {
    Ok(match path {
        Some(p) => GridConfig::load(p)?,
        None => GridConfig::default(),
    })
}

fn single_cell(path: Option<&Path>) -> Result<RunConfig> {
    let mut cells = grid(path)?.cells()?;
    if cells.len() != 1 {
        return Err(CliError::Config(format!("this command takes a single-cell config, got {} cells", cells.len())));
    }
    Ok(cells.remove(0))
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    println!("{text}");
    if let Some(p) = out {
        std::fs::write(p, text).map_err(|e| CliError::io(p, e))?;
    }
    Ok(())
}

/// Ledger of a model allocated at the configured sizes.
pub fn params_ledger(cfg: &RunConfig) -> Result<ParamLedger> {
    let model = PropagationModel::init(cfg, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0))?;
    Ok(model.ledger())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Bench { config, out, seed, repeat } => {
            let g = grid(config.as_deref())?;
            let report = bench::thread_pool()?.install(|| bench::run_bench(&g, seed, repeat))?;
            let (csv, json) = bench::write_report(&report, &out)?;
            println!("{} cells -> {} {}", report.cells.len(), csv.display(), json.display());
        }
        Command::Gradcheck { seed, out, corrupt } => {
            let rows = bench::thread_pool()?.install(|| gradcheck::run_suite(seed, corrupt))?;
            print!("{}", gradcheck::format_table(&rows));
            if let Some(p) = out {
                std::fs::write(&p, serde_json::to_string_pretty(&rows)?).map_err(|e| CliError::io(&p, e))?;
            }
            let failed = rows.iter().filter(|r| !r.pass).count();
            if failed > 0 {
                return Err(CliError::GradCheck { failed, total: rows.len() });
            }
        }
        Command::Params { config, out } => {
            let cfg = single_cell(config.as_deref())?;
            let ledger = params_ledger(&cfg)?;
            emit(&serde_json::to_string_pretty(&ledger)?, out.as_deref())?;
        }
        Command::Demo { config, out, seed } => {
            let cfg = single_cell(config.as_deref())?;
            let s = demo::run_demo(&cfg, seed, &out)?;
            println!("{} tensors -> {}", s.tensors.len(), out.display());
        }
        Command::DumpNeighborhood { d, dense, out } => {
            let spec = if dense { NeighborhoodSpec::dense(d)? } else { NeighborhoodSpec::progressive(d)? };
            emit(&spec.to_json(), out.as_deref())?;
        }
    }
    Ok(())
}
