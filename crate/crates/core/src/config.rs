//! Flat `key = value` run configuration.
//!
//! One assignment per line, `#` starts a comment. Precedence is command-line
//! overrides, then the file, then defaults; `RANK_SEED` supplies the seed
//! when neither sets it.

use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::data::{ExampleOptions, LoadOptions, MalformedPolicy};
use crate::train::TrainConfig;

pub const SEED_ENV: &str = "RANK_SEED";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("config line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("bad value '{value}' for {key}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub run_id: String,
    #[serde(flatten)]
    pub train: TrainConfig,
    pub delimiter: String,
    pub window_stride: usize,
    pub skip_malformed: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "listrank".into(),
            train: TrainConfig::default(),
            delimiter: "::".into(),
            window_stride: 1,
            skip_malformed: true,
        }
    }
}

/// `(line number, key, value)` triples from a config file.
pub fn parse_assignments(text: &str) -> Result<Vec<(usize, String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(ConfigError::Syntax { line: i + 1 });
        }
        out.push((i + 1, k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let t = &mut self.train;
        match key {
            "run_id" => self.run_id = value.to_string(),
            "delimiter" => self.delimiter = value.to_string(),
            "window_stride" => self.window_stride = parse(key, value)?,
            "skip_malformed" => self.skip_malformed = parse(key, value)?,
            "alpha" => t.alpha = parse(key, value)?,
            "beta" => t.beta = parse(key, value)?,
            "gamma" => t.gamma = parse(key, value)?,
            "sigma" => t.sigma = parse(key, value)?,
            "learning_rate" => t.learning_rate = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "grad_accum_steps" => t.grad_accum_steps = parse(key, value)?,
            "weight_decay" => t.weight_decay = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "use_sll" => t.use_sll = parse(key, value)?,
            "use_psl" => t.use_psl = parse(key, value)?,
            "ndcg_cutoffs" => {
                t.ndcg_cutoffs = value
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_, _>>()?
            }
            "m" => t.m = parse(key, value)?,
            "history_len" => t.history_len = parse(key, value)?,
            "emb" => t.emb = parse(key, value)?,
            "position_embeddings" => t.position_embeddings = parse(key, value)?,
            "soft_argmax" => t.soft_argmax = parse(key, value)?,
            "kl_direction" => t.kl_direction = parse(key, value)?,
            "tie_break" => t.tie_break = parse(key, value)?,
            "workers" => t.workers = parse(key, value)?,
            "bias_trials" => t.bias_trials = parse(key, value)?,
            "bias_examples" => t.bias_examples = parse(key, value)?,
            "log_timing" => t.log_timing = parse(key, value)?,
            other => return Err(ConfigError::UnknownKey(other.to_string())),
        }
        Ok(())
    }

    /// Merges defaults, the file, the seed fallback and overrides, then
    /// validates the result.
    pub fn resolve(file: Option<&str>, overrides: &[(String, String)], env_seed: Option<&str>) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seed_set = false;
        if let Some(text) = file {
            for (_, k, v) in parse_assignments(text)? {
                seed_set |= k == "seed";
                cfg.set(&k, &v)?;
            }
        }
        seed_set |= overrides.iter().any(|(k, _)| k == "seed");
        if !seed_set {
            if let Some(s) = env_seed {
                cfg.set("seed", s.trim())?;
            }
        }
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if cfg.window_stride == 0 || cfg.delimiter.is_empty() {
            return Err(ConfigError::Invalid("window_stride must be >= 1 and delimiter non-empty".into()));
        }
        Ok(cfg)
    }

    pub fn load_options(&self) -> LoadOptions {
        LoadOptions {
            delimiter: self.delimiter.clone(),
            policy: if self.skip_malformed { MalformedPolicy::Skip } else { MalformedPolicy::Abort },
        }
    }

    pub fn example_options(&self) -> ExampleOptions {
        ExampleOptions {
            m: self.train.m,
            history_len: self.train.history_len,
            window_stride: self.window_stride,
            tie_break: self.train.tie_break,
        }
    }
}
