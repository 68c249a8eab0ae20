//! Run configuration: one TOML file with a section per pipeline stage.
//!
//! ```toml
//! seed = 0
//! output_dir = "runs/guzheng-mertech"
//!
//! [data]
//! corpus = "prepared/guzheng"
//!
//! [model]
//! variant = "MERTech"
//! ```
//!
//! Unknown keys are rejected. Command-line flags are applied as dotted-key
//! overrides before validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::ClassMap;
use crate::downstream::{HeadConfig, Variant};
use crate::encoder::{BackendKind, EncoderConfig};
use crate::metrics::{Aggregation, DEFAULT_TOLERANCE};
use crate::objective::LossWeights;
use crate::postprocess::DecodeConfig;
use crate::trainer::{ModelSpec, Precision, TrainConfig};
use crate::{Error, Result};

/// Keys that have no default.
pub const REQUIRED_KEYS: [&str; 4] = ["seed", "output_dir", "data.corpus", "model.variant"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// A directory written by `prepare`.
    pub corpus: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: Variant,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_heads")]
    pub attention_heads: usize,
    #[serde(default = "default_true")]
    pub detach_onset: bool,
    #[serde(default)]
    pub precision: Precision,
}

fn default_hidden() -> usize {
    HeadConfig::default().hidden
}
fn default_dropout() -> f64 {
    HeadConfig::default().dropout
}
fn default_heads() -> usize {
    HeadConfig::default().attention_heads
}
fn default_true() -> bool {
    true
}

impl ModelSection {
    pub fn head(&self) -> HeadConfig {
        HeadConfig {
            hidden: self.hidden,
            dropout: self.dropout,
            attention_heads: self.attention_heads,
            detach_onset: self.detach_onset,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub tolerance: f64,
    pub aggregation: Aggregation,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            tolerance: DEFAULT_TOLERANCE,
            aggregation: Aggregation::MeanOfFolds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataSection,
    #[serde(default)]
    pub encoder: EncoderConfig,
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossWeights,
    #[serde(default)]
    pub decode: DecodeConfig,
    #[serde(default)]
    pub eval: EvalSection,
}

fn lookup<'a>(table: &'a toml::Table, key: &str) -> Option<&'a toml::Value> {
    let mut parts = key.split('.');
    let mut cur = table.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_table()?.get(p)?;
    }
    Some(cur)
}

/// Sets `key` (dotted) in `table`, creating intermediate tables.
pub fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let (last, path) = parts.split_last().ok_or_else(|| Error::Config("empty override key".into()))?;
    let mut cur = table;
    for p in path {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{p}` in override `{key}` is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    /// Parses TOML text, applies overrides, and checks required keys.
    /// Paths are resolved relative to `base` when given.
    pub fn parse(text: &str, overrides: &[(String, toml::Value)], base: Option<&Path>) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        for (k, v) in overrides {
            set_key(&mut table, k, v.clone())?;
        }
        for key in REQUIRED_KEYS {
            if lookup(&table, key).is_none() {
                return Err(Error::Config(format!("missing config key `{key}`")));
            }
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        if let Some(base) = base {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            fix(&mut cfg.data.corpus);
            fix(&mut cfg.output_dir);
            if let Some(dir) = cfg.encoder.checkpoint_dir.as_mut() {
                fix(dir);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, toml::Value)]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let abs = std::path::absolute(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, overrides, abs.parent())
    }

    /// Checks value ranges and that referenced paths exist.
    pub fn validate(&self) -> Result<()> {
        self.model.head().validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.decode.validate()?;
        if !(self.eval.tolerance.is_finite() && self.eval.tolerance >= 0.0) {
            return Err(Error::Config(format!("eval.tolerance must be non-negative, got {}", self.eval.tolerance)));
        }
        if !self.data.corpus.join("corpus.json").exists() {
            return Err(Error::Config(format!(
                "data.corpus `{}` is not a prepared corpus (run `prepare` first)",
                self.data.corpus.display()
            )));
        }
        if self.encoder.backend == BackendKind::Pretrained {
            let dir = self.encoder.resolve_checkpoint_dir()?;
            if !dir.is_dir() {
                return Err(Error::Config(format!("encoder checkpoint `{}` does not exist", dir.display())));
            }
        }
        Ok(())
    }

    pub fn model_spec(&self, class_map: ClassMap) -> ModelSpec {
        ModelSpec {
            variant: self.model.variant,
            class_map,
            encoder: self.encoder.clone(),
            head: self.model.head(),
            freeze_extractor: self.train.freeze_extractor,
            seed: self.seed,
            precision: self.model.precision,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
