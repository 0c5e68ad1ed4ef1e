//! Command-line driver: configuration, dataset ingestion, pipelines and
//! reports.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{CanarySource, ExperimentConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ibis", version, about = "Canary selection, crafting and one-run privacy audits")]
pub struct Cli {
    /// TOML configuration; defaults apply to every missing key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `ibis-out`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Number of audit runs.
    #[arg(long, global = true)]
    pub runs: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Influence-based greedy canary selection.
    Select,
    /// Selection followed by bilevel refinement.
    Craft {
        /// Bilevel epochs; 0 returns the selected canaries unchanged.
        #[arg(long)]
        iterations: Option<usize>,
    },
    /// Concurrent one-run audits with an aggregate report.
    Audit {
        #[arg(long, value_enum)]
        canaries: Option<CanarySourceArg>,
        /// Canary CSV as written by `select` or `craft`.
        #[arg(long)]
        canary_file: Option<PathBuf>,
    },
    /// Least-squares interference over an angle sweep of two canaries.
    Interfere,
    /// Merge the reports of several audit output directories.
    Report {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum CanarySourceArg {
    Random,
    Influence,
    Ibis,
    File,
}

impl From<CanarySourceArg> for CanarySource {
    fn from(a: CanarySourceArg) -> Self {
        match a {
            CanarySourceArg::Random => CanarySource::Random,
            CanarySourceArg::Influence => CanarySource::Influence,
            CanarySourceArg::Ibis => CanarySource::Ibis,
            CanarySourceArg::File => CanarySource::File,
        }
    }
}

/// Resolved configuration after applying command-line overrides.
pub fn resolve(cli: &Cli) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.out = Some(o.clone());
    }
    if let Some(r) = cli.runs {
        cfg.audit.runs = r;
    }
    match &cli.command {
        Command::Craft { iterations: Some(n) } => cfg.bilevel.epochs = *n,
        Command::Audit { canaries, canary_file } => {
            if let Some(c) = canaries {
                cfg.audit.canaries = (*c).into();
            }
            if let Some(f) = canary_file {
                cfg.audit.canary_file = Some(f.clone());
                if canaries.is_none() {
                    cfg.audit.canaries = CanarySource::File;
                }
            }
        }
        _ => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Runs the parsed command and returns the files it wrote.
pub fn run(cli: &Cli) -> Result<Vec<PathBuf>, CliError> {
    let cfg = resolve(cli)?;
    let out = cfg.out.clone().unwrap_or_else(|| PathBuf::from("ibis-out"));
    match &cli.command {
        Command::Select => commands::select(&cfg, &out),
        Command::Craft { .. } => commands::craft(&cfg, &out),
        Command::Audit { .. } => commands::audit(&cfg, &out),
        Command::Interfere => commands::interfere(&cfg, &out),
        Command::Report { dirs } => commands::report(dirs, &out),
    }
}
