//! Command-line driver: configuration resolution, run manifests and the
//! `prepare`, `train`, `evaluate`, `ablate`, `grid` and `export-embeddings`
//! subcommands.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod config;
pub mod grid;

pub use config::{parse_config, ConfigFlags, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key:?} cannot take value {value:?}")]
    TypeError { key: String, value: String },
    #[error("config key {0:?} is out of range")]
    RangeError(String),
    #[error("config line {0} is not `key = value`")]
    MalformedConfig(usize),
    #[error("invalid argument: {0}")]
    Usage(String),
    #[error("missing prerequisite {0}; run the preceding subcommand first")]
    MissingPrerequisite(PathBuf),
    #[error(transparent)]
    Core(#[from] mentor_core::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use mentor_core::Error as E;
        match self {
            Self::UnknownKey(_) | Self::TypeError { .. } | Self::RangeError(_) | Self::MalformedConfig(_) | Self::Usage(_) => {
                EXIT_CONFIG
            }
            Self::Core(E::Diverged(_) | E::NonFiniteLoss(_) | E::NonFiniteUpdate(_)) => EXIT_DIVERGED,
            Self::Core(E::InvalidArgument(_)) => EXIT_CONFIG,
            Self::MissingPrerequisite(_) | Self::Core(_) | Self::Io(_) | Self::Json(_) => EXIT_DATA,
        }
    }
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Directory with `interactions.tsv`, `visual.mmf` and `textual.mmf`.
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    /// Run directory; every output lands here.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    #[command(flatten)]
    pub flags: ConfigFlags,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the seeded block-structured demo dataset into `--data-dir`.
    Synthetic {
        #[arg(long, default_value_t = 0)]
        data_seed: u64,
    },
    /// K-core filter, split, align features and cache item graphs.
    Prepare,
    /// Train on prepared data; writes the best checkpoint and a JSON-lines log.
    Train,
    /// Score a trained checkpoint.
    Evaluate {
        /// `valid` or `test`.
        #[arg(long, default_value = "test")]
        split: String,
        /// Also write per-user metrics as JSON lines.
        #[arg(long)]
        per_user: bool,
    },
    /// Train ablation variants and write a metrics table.
    Ablate {
        /// `alignment`, `enhancement` or `all`; ignored when `--variants` is given.
        #[arg(long, default_value = "all")]
        set: String,
        /// Explicit comma-separated variant names.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<String>,
    },
    /// Grid search over a hyperparameter preset, ranked by validation Recall@20.
    Grid {
        #[arg(long, default_value = "published")]
        preset: String,
        /// Only run the first N combinations.
        #[arg(long)]
        limit: Option<usize>,
        /// Concurrent training runs.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Print the combinations and exit.
        #[arg(long)]
        list: bool,
    },
    /// Write item embedding tables for external plotting.
    ExportEmbeddings {
        /// Comma-separated tables among id, visual, textual, fused.
        #[arg(long, value_delimiter = ',', default_value = "visual,textual")]
        tables: Vec<String>,
        /// Number of sampled items.
        #[arg(long, default_value_t = 500)]
        sample: usize,
        /// Sampling seed; defaults to the run seed.
        #[arg(long)]
        sample_seed: Option<u64>,
    },
}

#[derive(Debug, Parser)]
#[command(name = "mentor", version, about = "Train and evaluate a multimodal graph recommender")]
pub struct App {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

/// Caps the global worker pool when `MENTOR_THREADS` is set.
pub fn init_thread_pool() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("MENTOR_THREADS") {
        let n: usize = v.parse().map_err(|_| CliError::TypeError {
            key: "MENTOR_THREADS".into(),
            value: v.clone(),
        })?;
        if n == 0 {
            return Err(CliError::RangeError("MENTOR_THREADS".into()));
        }
        // a second initialization in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn run(app: App) -> Result<(), CliError> {
    commands::dispatch(&app.common, &app.command)
}
