//! Flat `key=value` run configuration with a fixed key set.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Every accepted key with its default and a one-line description.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("seed", "7", "run seed"),
    ("dataset", "gmm2d", "gmm2d or tiny_image"),
    ("n_conditions", "4", "conditions of the gmm2d dataset"),
    ("width", "64", "hidden width"),
    ("depth", "2", "blocks per network"),
    ("d_embed", "16", "conditioning embedding width"),
    ("n_heads", "2", "attention heads"),
    ("iters", "1000", "training iterations"),
    ("batch_size", "64", "training batch size"),
    ("lr", "0.002", "AdamW learning rate"),
    ("weight_decay", "0.01", "AdamW decoupled weight decay"),
    ("ema_decay", "0.99", "EMA decay"),
    ("schedule", "toy", "branch schedule file, or toy"),
    ("ckpt", "", "model checkpoint to load"),
    ("router", "", "router file for routed sampling"),
    ("ckpt_dir", "", "directory holding the router's checkpoints"),
    ("interval", "0,0", "noise interval expression for eval"),
    ("n_samples", "1000", "samples to draw"),
    ("n_eval", "4000", "held-out draws per loss estimate"),
    ("n_projections", "64", "sliced-Wasserstein projections"),
    ("n_steps", "25", "sampler steps"),
    ("solver", "heun", "euler, heun or ab"),
    ("ab_order", "3", "Adams-Bashforth order"),
    ("guidance", "1", "classifier-free guidance scale"),
    ("condition", "0", "condition to sample"),
    ("switch_to", "1", "second condition of the prompt switch"),
    ("sigma", "", "comma-separated noise levels for probes"),
    ("w_prime", "0.5", "paint-with-words strength"),
    ("name", "", "experiment name"),
    ("out", "", "output directory"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl Config {
    /// Defaults overlaid with the lines of a config file.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn merge_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, got {line:?}"),
            })?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.to_string();
                Ok(())
            }
            None => Err(Error::Config(format!("unknown config key `{key}`"))),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).unwrap_or("")
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .values
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        raw.parse()
            .map_err(|_| Error::Config(format!("invalid value {raw:?} for `{key}`")))
    }

    /// `None` when the key is empty.
    pub fn opt(&self, key: &str) -> Option<&str> {
        Some(self.str(key)).filter(|s| !s.is_empty())
    }

    pub fn f64_list(&self, key: &str) -> Result<Vec<f64>> {
        self.str(key)
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| {
                s.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("invalid number {s:?} in `{key}`")))
            })
            .collect()
    }

    /// All keys as sorted `key=value` lines.
    pub fn snapshot(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.values {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}
