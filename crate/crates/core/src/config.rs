//! Run configuration as TOML with `[train]`, `[model]`, `[data]` and
//! `[eval]` sections. Every key is optional and falls back to its default.
//!
//! ```
//! use segt::config::TrainConfig;
//!
//! let mut cfg = TrainConfig::from_toml_str("[train]\nbatch_size = 4\n").unwrap();
//! assert_eq!(cfg.train.batch_size, 4);
//! assert_eq!(cfg.train.learning_rate, 1e-4);
//! cfg.set("model.use_cfm", "false").unwrap();
//! assert!(!cfg.model.use_cfm);
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::AdamWConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: u64,
    /// Stops after this many optimizer steps when set (0 means unbounded).
    pub max_steps: u64,
    pub base_size: usize,
    pub scales: Vec<f64>,
    /// Seeds parameter initialisation and the epoch plans.
    pub seed: u64,
    pub grad_clip_norm: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            batch_size: 16,
            epochs: 100,
            max_steps: 0,
            base_size: 352,
            scales: vec![0.75, 1.0, 1.25],
            seed: 0,
            grad_clip_norm: 0.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Training dataset root; relative paths resolve against the config file.
    pub root: PathBuf,
    /// Optional id list restricting the training split.
    pub manifest: Option<PathBuf>,
    /// Reject masks whose raw values are not exactly binary.
    pub strict_masks: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection { root: PathBuf::from("data/train"), manifest: None, strict_masks: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub threshold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { threshold: 0.5 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub train: TrainSection,
    pub model: ModelConfig,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig::new(self.train.learning_rate, self.train.weight_decay)
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.learning_rate > 0.0 && t.weight_decay >= 0.0 && t.grad_clip_norm > 0.0) {
            return Err(Error::config("learning_rate and grad_clip_norm must be positive, weight_decay non-negative"));
        }
        if t.batch_size == 0 || t.base_size == 0 {
            return Err(Error::config("batch_size and base_size must be positive"));
        }
        if t.scales.is_empty() || t.scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::config(format!("scales {:?} must be a non-empty set of positive numbers", t.scales)));
        }
        if t.epochs == 0 && t.max_steps == 0 {
            return Err(Error::config("either epochs or max_steps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.eval.threshold) {
            return Err(Error::config("eval.threshold must lie in [0, 1]"));
        }
        if self.model.width == 0 {
            return Err(Error::config("model.width must be positive"));
        }
        Ok(())
    }

    /// Overrides one dotted key such as `train.seed` with a TOML literal.
    /// Bare words that do not parse as TOML are taken as strings.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let (section, field) =
            key.split_once('.').ok_or_else(|| Error::config(format!("override key `{key}` needs a section")))?;
        let parsed: toml::Value = toml::from_str::<toml::Table>(&format!("v = {value}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.to_string()));
        let mut doc = toml::Table::try_from(&*self).map_err(|e| Error::config(e.to_string()))?;
        let table = doc
            .get_mut(section)
            .and_then(toml::Value::as_table_mut)
            .ok_or_else(|| Error::config(format!("unknown config section `{section}`")))?;
        table.insert(field.to_string(), parsed);
        let updated: TrainConfig =
            doc.try_into().map_err(|e: toml::de::Error| Error::config(format!("override `{key}`: {e}")))?;
        updated.validate()?;
        *self = updated;
        Ok(())
    }

    /// `(dotted key, default value)` for every key, sorted by key.
    pub fn documented_keys() -> Vec<(String, String)> {
        let doc = toml::Table::try_from(TrainConfig::default()).expect("config serialises");
        let mut out = Vec::new();
        for (section, body) in &doc {
            if let Some(t) = body.as_table() {
                for (k, v) in t {
                    out.push((format!("{section}.{k}"), v.to_string()));
                }
            }
        }
        out.push(("data.manifest".into(), "(unset)".into()));
        out.sort();
        out
    }
}
