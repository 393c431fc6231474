//! Flat `key = value` configuration with layered precedence:
//! defaults, then the config file, then command-line flags.

use std::path::Path;
use std::str::FromStr;

use clap::Args;
use mentor_core::model::FusionMode;
use mentor_core::ssl::{AlignLevels, NceNegatives};
use mentor_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Training hyperparameters plus the data-preparation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub kcore: usize,
    pub split_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            kcore: 5,
            split_seed: 0,
        }
    }
}

/// Canonical key names, in the order they are written out.
pub const KEYS: [&str; 22] = [
    "learning_rate",
    "epochs",
    "batch_size",
    "early_stop_patience",
    "embedding_dim",
    "ui_layers",
    "item_layers",
    "knn_k",
    "knn_normalize",
    "fusion",
    "dropout",
    "lambda_f",
    "lambda_g",
    "lambda_align",
    "align_levels",
    "tau",
    "lambda_e",
    "noise_eps",
    "nce_negatives",
    "seed",
    "kcore",
    "split_seed",
];

fn canonical(key: &str) -> Option<&'static str> {
    let key = match key {
        "lr" => "learning_rate",
        "patience" => "early_stop_patience",
        "d" => "embedding_dim",
        "L" | "layers" => "ui_layers",
        "k" => "knn_k",
        "p" => "dropout",
        "eps" => "noise_eps",
        "negatives" => "nce_negatives",
        other => other,
    };
    KEYS.iter().copied().find(|k| *k == key)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value.parse().map_err(|_| CliError::TypeError {
        key: key.to_owned(),
        value: value.to_owned(),
    })
}

impl RunConfig {
    /// Applies one `key = value` pair. Range checks happen in [`Self::validate`].
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = canonical(key).ok_or_else(|| CliError::UnknownKey(key.to_owned()))?;
        let t = &mut self.train;
        match key {
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "early_stop_patience" => t.early_stop_patience = parse(key, value)?,
            "embedding_dim" => t.embedding_dim = parse(key, value)?,
            "ui_layers" => t.ui_layers = parse(key, value)?,
            "item_layers" => t.item_layers = parse(key, value)?,
            "knn_k" => t.knn_k = parse(key, value)?,
            "knn_normalize" => t.knn_normalize = parse(key, value)?,
            "fusion" => t.fusion = parse::<FusionMode>(key, value)?,
            "dropout" => t.dropout = parse(key, value)?,
            "lambda_f" => t.lambda_f = parse(key, value)?,
            "lambda_g" => t.lambda_g = parse(key, value)?,
            "lambda_align" => t.lambda_align = parse(key, value)?,
            "align_levels" => t.align_levels = parse::<AlignLevels>(key, value)?,
            "tau" => t.tau = parse(key, value)?,
            "lambda_e" => t.lambda_e = parse(key, value)?,
            "noise_eps" => t.noise_eps = parse(key, value)?,
            "nce_negatives" => t.nce_negatives = parse::<NceNegatives>(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "kcore" => self.kcore = parse(key, value)?,
            "split_seed" => self.split_seed = parse(key, value)?,
            _ => unreachable!("canonical keys are exhaustive"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if let Some(key) = self.train.invalid_field() {
            return Err(CliError::RangeError(key.to_owned()));
        }
        if self.kcore == 0 {
            return Err(CliError::RangeError("kcore".into()));
        }
        Ok(())
    }

    /// Applies the lines of a flat config text.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or(CliError::MalformedConfig(n + 1))?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// `key = value` text that [`Self::apply_text`] reads back exactly.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let values: Vec<(&str, String)> = vec![
            ("learning_rate", t.learning_rate.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("early_stop_patience", t.early_stop_patience.to_string()),
            ("embedding_dim", t.embedding_dim.to_string()),
            ("ui_layers", t.ui_layers.to_string()),
            ("item_layers", t.item_layers.to_string()),
            ("knn_k", t.knn_k.to_string()),
            ("knn_normalize", t.knn_normalize.to_string()),
            ("fusion", t.fusion.to_string()),
            ("dropout", t.dropout.to_string()),
            ("lambda_f", t.lambda_f.to_string()),
            ("lambda_g", t.lambda_g.to_string()),
            ("lambda_align", t.lambda_align.to_string()),
            ("align_levels", t.align_levels.to_string()),
            ("tau", t.tau.to_string()),
            ("lambda_e", t.lambda_e.to_string()),
            ("noise_eps", t.noise_eps.to_string()),
            ("nce_negatives", t.nce_negatives.to_string()),
            ("seed", t.seed.to_string()),
            ("kcore", self.kcore.to_string()),
            ("split_seed", self.split_seed.to_string()),
        ];
        values.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// First eight bytes of the SHA-256 of [`Self::to_text`].
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.to_text().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}

/// One optional flag per configuration key. Values are parsed with the same
/// rules as the config file.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigFlags {
    #[arg(long, global = true, value_name = "F64")]
    pub learning_rate: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub epochs: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub batch_size: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub early_stop_patience: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub embedding_dim: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub ui_layers: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub item_layers: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub knn_k: Option<String>,
    #[arg(long, global = true, value_name = "BOOL")]
    pub knn_normalize: Option<String>,
    #[arg(long, global = true, value_name = "sum|concat")]
    pub fusion: Option<String>,
    #[arg(long, global = true, value_name = "P")]
    pub dropout: Option<String>,
    #[arg(long, global = true, value_name = "F64")]
    pub lambda_f: Option<String>,
    #[arg(long, global = true, value_name = "F64")]
    pub lambda_g: Option<String>,
    #[arg(long, global = true, value_name = "F64")]
    pub lambda_align: Option<String>,
    #[arg(long, global = true, value_name = "all|none|L1,L2,..")]
    pub align_levels: Option<String>,
    #[arg(long, global = true, value_name = "F64")]
    pub tau: Option<String>,
    #[arg(long, global = true, value_name = "F64")]
    pub lambda_e: Option<String>,
    #[arg(long, global = true, value_name = "F64")]
    pub noise_eps: Option<String>,
    #[arg(long, global = true, value_name = "batch|all")]
    pub nce_negatives: Option<String>,
    #[arg(long, global = true, value_name = "U64")]
    pub seed: Option<String>,
    #[arg(long, global = true, value_name = "N")]
    pub kcore: Option<String>,
    #[arg(long, global = true, value_name = "U64")]
    pub split_seed: Option<String>,
}

impl ConfigFlags {
    pub fn pairs(&self) -> Vec<(&'static str, &str)> {
        let all: [(&'static str, &Option<String>); 22] = [
            ("learning_rate", &self.learning_rate),
            ("epochs", &self.epochs),
            ("batch_size", &self.batch_size),
            ("early_stop_patience", &self.early_stop_patience),
            ("embedding_dim", &self.embedding_dim),
            ("ui_layers", &self.ui_layers),
            ("item_layers", &self.item_layers),
            ("knn_k", &self.knn_k),
            ("knn_normalize", &self.knn_normalize),
            ("fusion", &self.fusion),
            ("dropout", &self.dropout),
            ("lambda_f", &self.lambda_f),
            ("lambda_g", &self.lambda_g),
            ("lambda_align", &self.lambda_align),
            ("align_levels", &self.align_levels),
            ("tau", &self.tau),
            ("lambda_e", &self.lambda_e),
            ("noise_eps", &self.noise_eps),
            ("nce_negatives", &self.nce_negatives),
            ("seed", &self.seed),
            ("kcore", &self.kcore),
            ("split_seed", &self.split_seed),
        ];
        all.into_iter().filter_map(|(k, v)| v.as_deref().map(|v| (k, v))).collect()
    }
}

/// Resolves `base ← file ← flags` and validates the result.
pub fn parse_config(base: RunConfig, file: Option<&Path>, flags: &ConfigFlags) -> Result<RunConfig, CliError> {
    let mut cfg = base;
    if let Some(path) = file {
        let text = std::fs::read_to_string(path).map_err(|_| CliError::MissingPrerequisite(path.to_path_buf()))?;
        cfg.apply_text(&text)?;
    }
    for (k, v) in flags.pairs() {
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}
