//! Flat `key = value` run configuration with dotted section keys.
//!
//! Resolution order is built-in defaults for the task, then file values,
//! then command-line overrides. [`RunConfig::to_text`] writes every key so a
//! resolved config can be echoed into a run log and parsed back unchanged.

use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{BundleSizes, ToyLanguageSpec};
use crate::error::{Error, Result};
use crate::objectives::TaskKind;
use crate::pipeline::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub swap_rate: f64,
    pub noise_rate: f64,
    pub variant_rate: f64,
    pub train_size: usize,
    pub test_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            swap_rate: 0.1,
            noise_rate: 0.1,
            variant_rate: 0.3,
            train_size: 2000,
            test_size: 500,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn for_task(task: TaskKind) -> Self {
        RunConfig {
            train: TrainConfig::for_task(task),
            data: DataConfig::default(),
            paths: PathsConfig::default(),
        }
    }

    /// The toy language pair; its cipher is seeded by the run seed.
    pub fn language(&self) -> Result<ToyLanguageSpec> {
        ToyLanguageSpec::new(
            self.train.encoder.vocab_size,
            self.data.swap_rate,
            self.data.noise_rate,
            self.data.variant_rate,
            self.train.seed,
        )
    }

    pub fn sizes(&self) -> BundleSizes {
        BundleSizes {
            train: self.data.train_size,
            test: self.data.test_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.language()?;
        Ok(())
    }

    /// Defaults for the task named in `overrides` or `file` (in that order of
    /// precedence), then every file entry, then every override.
    pub fn resolve(file: &[Entry], overrides: &[(String, String)]) -> Result<Self> {
        let task_text = overrides
            .iter()
            .rev()
            .find(|(k, _)| k == "task")
            .map(|(_, v)| v.as_str())
            .or_else(|| file.iter().find(|e| e.key == "task").map(|e| e.value.as_str()));
        let task = match task_text {
            Some(t) => t.parse()?,
            None => TaskKind::Classification,
        };
        let mut config = RunConfig::for_task(task);
        for e in file {
            config.set(&e.key, &e.value).map_err(|err| Error::Parse {
                line: e.line,
                message: err.to_string(),
            })?;
        }
        for (k, v) in overrides {
            config.set(k, v)?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Parses and resolves a config file without overrides.
    pub fn from_text(text: &str) -> Result<Self> {
        RunConfig::resolve(&parse_entries(text)?, &[])
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "task" => t.task = value.parse()?,
            "seed" => t.seed = num(key, value)?,
            "alpha" => t.alpha = num(key, value)?,
            "learning_rate" => t.learning_rate = num(key, value)?,
            "batch_size" => t.batch_size = num(key, value)?,
            "epochs" => t.epochs = num(key, value)?,
            "encoder.num_layers" => t.encoder.num_layers = num(key, value)?,
            "encoder.d_model" => t.encoder.d_model = num(key, value)?,
            "encoder.num_heads" => t.encoder.num_heads = num(key, value)?,
            "encoder.ffn_dim" => t.encoder.ffn_dim = num(key, value)?,
            "encoder.vocab_size" => t.encoder.vocab_size = num(key, value)?,
            "encoder.max_len" => t.encoder.max_len = num(key, value)?,
            "mixup.lambda0" => t.mixup.lambda0 = num(key, value)?,
            "mixup.mix_layer" => t.mixup.mix_layer = optional(key, value)?,
            "mixup.schedule_k" => t.mixup.schedule_k = num(key, value)?,
            "mixup.n_scale" => t.mixup.n_scale = optional(key, value)?,
            "toggles.use_mixup" => t.toggles.use_mixup = num(key, value)?,
            "toggles.mixup_inference" => t.toggles.mixup_inference = num(key, value)?,
            "toggles.scheduled_sampling" => t.toggles.scheduled_sampling = num(key, value)?,
            "toggles.mse_consistency" => t.toggles.mse_consistency = num(key, value)?,
            "toggles.kl_consistency" => t.toggles.kl_consistency = num(key, value)?,
            "toggles.constant_lambda" => t.toggles.constant_lambda = num(key, value)?,
            "toggles.mse_on_mixed" => t.toggles.mse_on_mixed = num(key, value)?,
            "data.swap_rate" => self.data.swap_rate = num(key, value)?,
            "data.noise_rate" => self.data.noise_rate = num(key, value)?,
            "data.variant_rate" => self.data.variant_rate = num(key, value)?,
            "data.train_size" => self.data.train_size = num(key, value)?,
            "data.test_size" => self.data.test_size = num(key, value)?,
            "paths.data" => self.paths.data = path(value),
            "paths.checkpoint" => self.paths.checkpoint = path(value),
            "paths.out" => self.paths.out = path(value),
            other => return Err(Error::invalid(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Every key in a fixed order, one `key = value` per line.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".to_string());
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let rows: Vec<(&str, String)> = vec![
            ("task", t.task.to_string()),
            ("seed", t.seed.to_string()),
            ("alpha", t.alpha.to_string()),
            ("learning_rate", t.learning_rate.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("epochs", t.epochs.to_string()),
            ("encoder.num_layers", t.encoder.num_layers.to_string()),
            ("encoder.d_model", t.encoder.d_model.to_string()),
            ("encoder.num_heads", t.encoder.num_heads.to_string()),
            ("encoder.ffn_dim", t.encoder.ffn_dim.to_string()),
            ("encoder.vocab_size", t.encoder.vocab_size.to_string()),
            ("encoder.max_len", t.encoder.max_len.to_string()),
            ("mixup.lambda0", t.mixup.lambda0.to_string()),
            ("mixup.mix_layer", opt(t.mixup.mix_layer.map(|v| v.to_string()))),
            ("mixup.schedule_k", t.mixup.schedule_k.to_string()),
            ("mixup.n_scale", opt(t.mixup.n_scale.map(|v| v.to_string()))),
            ("toggles.use_mixup", t.toggles.use_mixup.to_string()),
            ("toggles.mixup_inference", t.toggles.mixup_inference.to_string()),
            ("toggles.scheduled_sampling", t.toggles.scheduled_sampling.to_string()),
            ("toggles.mse_consistency", t.toggles.mse_consistency.to_string()),
            ("toggles.kl_consistency", t.toggles.kl_consistency.to_string()),
            ("toggles.constant_lambda", t.toggles.constant_lambda.to_string()),
            ("toggles.mse_on_mixed", t.toggles.mse_on_mixed.to_string()),
            ("data.swap_rate", self.data.swap_rate.to_string()),
            ("data.noise_rate", self.data.noise_rate.to_string()),
            ("data.variant_rate", self.data.variant_rate.to_string()),
            ("data.train_size", self.data.train_size.to_string()),
            ("data.test_size", self.data.test_size.to_string()),
            ("paths.data", p(&self.paths.data)),
            ("paths.checkpoint", p(&self.paths.checkpoint)),
            ("paths.out", p(&self.paths.out)),
        ];
        rows.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig::for_task(TaskKind::Classification)
    }
}

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::invalid(format!("`{value}` is not a valid value for `{key}`")))
}

fn optional<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

/// One `key = value` line of a config file.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Splits a config file into entries. `#` starts a comment, a `[section]`
/// line prefixes later keys with `section.`, and values may be quoted.
pub fn parse_entries(text: &str) -> Result<Vec<Entry>> {
    let mut out: Vec<Entry> = Vec::new();
    let mut section = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse { line, message };
        if let Some(rest) = content.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| err("unterminated section header".into()))?
                .trim();
            section = if name.is_empty() { String::new() } else { format!("{name}.") };
            continue;
        }
        let (k, v) = content
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, found `{content}`")))?;
        let k = k.trim();
        if k.is_empty() {
            return Err(err("empty key".into()));
        }
        let v = v.trim();
        let v = v
            .strip_prefix('"')
            .and_then(|s| s.strip_suffix('"'))
            .unwrap_or(v);
        let key = format!("{section}{k}");
        if let Some(prev) = out.iter().find(|e| e.key == key) {
            return Err(err(format!("`{key}` already set on line {}", prev.line)));
        }
        out.push(Entry {
            line,
            key,
            value: v.to_string(),
        });
    }
    Ok(out)
}
