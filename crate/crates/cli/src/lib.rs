//! Command-line front end: configuration, stage orchestration and the
//! manifests that make reruns checkable.

pub mod config;
pub mod pipeline;
pub mod stage;

use std::path::PathBuf;

use churnforge_core::{Error, ErrorCategory, Result};
use clap::{Parser, Subcommand};

pub use config::PipelineConfig;

#[derive(Debug, Parser)]
#[command(name = "churnforge", version, about = "Churn prediction from call detail records")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Flat `key = value` config file; defaults apply without one.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (overrides `output.dir`).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Master seed (overrides `seed`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads, 0 for all cores (overrides `workers`).
    #[arg(long, global = true, env = "CHURNFORGE_WORKERS")]
    pub workers: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate a CDR dataset with planted churners.
    Generate,
    /// Build the feature matrix and labels.
    Featurize,
    /// Rank features by t-test, R² and tree importance.
    Select,
    /// Cross-validate and fit every model in the roster.
    Train,
    /// Write churn scores from the fitted models.
    Score,
    /// Assemble the evaluation report, ROC curves and histograms.
    Evaluate,
    /// All stages in order.
    Pipeline,
}

impl Cli {
    /// Effective configuration: file, then command-line overrides.
    pub fn load_config(&self) -> Result<PipelineConfig> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::from_file(path)?,
            None => PipelineConfig::default(),
        };
        if let Some(out) = &self.out {
            config.output_dir = out.clone();
        }
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(workers) = self.workers {
            config.workers = workers;
        }
        Ok(config)
    }
}

pub fn run(command: Command, config: &PipelineConfig) -> Result<()> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", config.workers)))?;
    pool.install(|| match command {
        Command::Generate => pipeline::generate_stage(config),
        Command::Featurize => pipeline::featurize_stage(config),
        Command::Select => pipeline::select_stage(config),
        Command::Train => pipeline::train_stage(config),
        Command::Score => pipeline::score_stage(config),
        Command::Evaluate => pipeline::evaluate_stage(config),
        Command::Pipeline => pipeline::pipeline(config),
    })
}

pub fn exit_code(err: &Error) -> i32 {
    match err.category() {
        ErrorCategory::Config => 1,
        ErrorCategory::Data => 2,
        ErrorCategory::Internal => 3,
    }
}
