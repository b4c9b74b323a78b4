//! Run configuration files (TOML). Every section is optional and falls back
//! to the defaults of the corresponding module; unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ablation::NumericAblation;
use crate::data::{SplitSpec, DEFAULT_NA};
use crate::encoder::{TextBackend, TextEncoderSpec};
use crate::model::ModelConfig;
use crate::smr::SmrConfig;
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config {path}: {msg}")]
    Parse { path: PathBuf, msg: String },
    #[error("{field}: {msg}")]
    Invalid { field: String, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub enum Precision {
    F32,
    F64,
}

impl TryFrom<u32> for Precision {
    type Error = String;

    fn try_from(bits: u32) -> Result<Self, String> {
        match bits {
            32 => Ok(Precision::F32),
            64 => Ok(Precision::F64),
            other => Err(format!("precision must be 32 or 64, got {other}")),
        }
    }
}

impl From<Precision> for u32 {
    fn from(p: Precision) -> u32 {
        match p {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

/// Settings shared by the tabular ablations (gamma, blocks, loss).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    /// Rows per synthetic table when no manifest is configured.
    pub synthetic_rows: usize,
    /// Model used by the sweeps; the `model` section is left for full runs.
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub text: TextEncoderSpec,
    pub numeric: NumericAblation,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            synthetic_rows: 1000,
            model: ModelConfig { smr: SmrConfig { high: 20, low: 4 }, ..ModelConfig::small() },
            train: TrainConfig { learning_rate: 1e-3, batch_size: 32, n_strides: 8, stride_size: 250, ..TrainConfig::default() },
            text: TextEncoderSpec { backend: TextBackend::Hashed { vocab_buckets: 256, embed_dim: 16 }, lowercase: true },
            numeric: NumericAblation::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub precision: Precision,
    /// Dataset manifest; relative paths resolve against the config file.
    pub data: Option<PathBuf>,
    /// Download cache for manifest entries without a local path.
    pub cache_dir: PathBuf,
    pub na_values: Vec<String>,
    pub split: SplitSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub text: TextEncoderSpec,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seeds: vec![0, 1, 2, 3, 4],
            out_dir: PathBuf::from("runs"),
            precision: Precision::F32,
            data: None,
            cache_dir: PathBuf::from("data"),
            na_values: DEFAULT_NA.iter().map(|s| s.to_string()).collect(),
            split: SplitSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            text: TextEncoderSpec::default(),
            ablation: AblationConfig::default(),
        }
    }
}

fn invalid(field: &str, msg: impl ToString) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), msg: msg.to_string() }
}

/// Maps a module-level validation message to the config key it names.
fn field_of(section: &str, msg: &str, keys: &[&str]) -> String {
    keys.iter()
        .find(|k| msg.contains(*k))
        .map(|k| format!("{section}.{k}"))
        .unwrap_or_else(|| section.to_string())
}

const MODEL_KEYS: [&str; 7] = ["n_heads", "n_blocks", "ratio", "basis_len", "mlp_ratio", "dropout", "dim"];
const TRAIN_KEYS: [&str; 12] = [
    "gamma",
    "eps_g",
    "stride_size",
    "batch_size",
    "learning_rate",
    "beta1",
    "eps_opt",
    "max_grad_norm",
    "weight_decay",
    "lr_decay_mult",
    "n_strides",
    "seed",
];

fn check_model(section: &str, m: &ModelConfig) -> Result<(), ConfigError> {
    m.validate().map_err(|e| {
        let msg = e.to_string();
        let field = if msg.contains("h must") || msg.contains("h + l") {
            format!("{section}.smr")
        } else {
            field_of(section, &msg, &MODEL_KEYS)
        };
        invalid(&field, msg)
    })
}

fn check_train(section: &str, t: &TrainConfig) -> Result<(), ConfigError> {
    t.validate().map_err(|e| {
        let msg = e.to_string();
        invalid(&field_of(section, &msg, &TRAIN_KEYS), msg)
    })
}

fn check_text(section: &str, t: &TextEncoderSpec) -> Result<(), ConfigError> {
    if let TextBackend::Hashed { vocab_buckets, embed_dim } = t.backend {
        if vocab_buckets < 2 {
            return Err(invalid(&format!("{section}.backend.vocab_buckets"), "need at least 2 buckets (bucket 0 is reserved)"));
        }
        if embed_dim == 0 {
            return Err(invalid(&format!("{section}.backend.embed_dim"), "must be positive"));
        }
    }
    Ok(())
}

impl RunConfig {
    /// Reads and validates a config file.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.into(), source })?;
        let mut cfg = Self::parse(&text).map_err(|msg| ConfigError::Parse { path: path.into(), msg })?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(d) = cfg.data.as_mut() {
            resolve(d);
        }
        for text in [&mut cfg.text, &mut cfg.ablation.text] {
            if let TextBackend::TableFile { path } = &mut text.backend {
                resolve(path);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        toml::from_str(text).map_err(|e| e.to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(invalid("seeds", "at least one seed is required"));
        }
        check_model("model", &self.model)?;
        check_train("train", &self.train)?;
        check_model("ablation.model", &self.ablation.model)?;
        check_train("ablation.train", &self.ablation.train)?;
        check_text("text", &self.text)?;
        check_text("ablation.text", &self.ablation.text)?;
        if !(self.split.eval_fraction > 0.0 && self.split.eval_fraction < 0.5) {
            return Err(invalid("split.eval_fraction", format!("{} outside (0, 0.5)", self.split.eval_fraction)));
        }
        let n = &self.ablation.numeric;
        if n.seeds.is_empty() || n.epochs == 0 || n.batch_size == 0 || n.hidden == 0 {
            return Err(invalid("ablation.numeric", "seeds, epochs, batch_size and hidden must be non-empty / positive"));
        }
        if !(n.learning_rate > 0.0) {
            return Err(invalid("ablation.numeric.learning_rate", "must be positive"));
        }
        if self.ablation.synthetic_rows < 10 {
            return Err(invalid("ablation.synthetic_rows", "need at least 10 rows"));
        }
        Ok(())
    }
}
