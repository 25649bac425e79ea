use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::losses::LossWeights;
use crate::net::NetConfig;
use crate::tensor::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Loss1 on synthetic, Loss2 on real, Loss3 across both.
    Joint,
    /// Loss1 alone.
    SynOnly,
    /// Loss2 alone.
    RealOnly,
    /// Loss1 on degree-labeled pseudo-real crops.
    Finetune,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "syn" | "syn_only" => Ok(Self::SynOnly),
            "real" | "real_only" => Ok(Self::RealOnly),
            "finetune" => Ok(Self::Finetune),
            other => Err(config_err!(
                "unknown training mode {other:?} (expected joint, syn, real or finetune)"
            )),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Joint => "joint",
            Self::SynOnly => "syn_only",
            Self::RealOnly => "real_only",
            Self::Finetune => "finetune",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Share of each joint batch drawn from the real pool (rounded down).
    pub real_fraction: f64,
    pub weights: LossWeights,
    pub seed: u64,
    pub mode: TrainMode,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Multiply the learning rate by `lr_decay_factor` from this epoch on.
    pub lr_decay_epoch: Option<usize>,
    pub lr_decay_factor: f64,
    /// Network preset name.
    pub net: String,
    /// Mix the synthetic pool into fine-tuning batches.
    pub finetune_with_syn: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            lr: adam.lr,
            epochs: 80,
            batch_size: 256,
            real_fraction: 0.25,
            weights: LossWeights::default(),
            seed: 0,
            mode: TrainMode::Joint,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            lr_decay_epoch: None,
            lr_decay_factor: 0.1,
            net: "desk".to_string(),
            finetune_with_syn: false,
        }
    }
}

/// Keys accepted by [`TrainConfig::set`], in file order.
pub const CONFIG_KEYS: &[&str] = &[
    "lr",
    "epochs",
    "batch_size",
    "real_fraction",
    "lambda1",
    "lambda2",
    "lambda3",
    "ot",
    "seed",
    "mode",
    "beta1",
    "beta2",
    "eps",
    "lr_decay_epoch",
    "lr_decay_factor",
    "net",
    "finetune_with_syn",
];

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| config_err!("{key}: cannot parse {value:?}"))
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be positive, got {}", self.lr));
        }
        if self.batch_size < 4 {
            return Err(config_err!("batch_size must be at least 4, got {}", self.batch_size));
        }
        if !(0.0..1.0).contains(&self.real_fraction) {
            return Err(config_err!(
                "real_fraction must lie in [0, 1), got {}",
                self.real_fraction
            ));
        }
        self.weights.validate()?;
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(config_err!("eps must be positive, got {}", self.eps));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(config_err!(
                "lr_decay_factor must be positive, got {}",
                self.lr_decay_factor
            ));
        }
        NetConfig::preset(&self.net)?;
        Ok(())
    }

    /// Real samples per joint batch.
    pub fn real_per_batch(&self) -> usize {
        (self.real_fraction * self.batch_size as f64).floor() as usize
    }

    pub fn adam(&self, epoch: usize) -> AdamConfig {
        let decayed = self.lr_decay_epoch.is_some_and(|e| epoch >= e);
        AdamConfig {
            lr: if decayed {
                self.lr * self.lr_decay_factor
            } else {
                self.lr
            },
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "real_fraction" => self.real_fraction = num(key, value)?,
            "lambda1" => self.weights.lambda1 = num(key, value)?,
            "lambda2" => self.weights.lambda2 = num(key, value)?,
            "lambda3" => self.weights.lambda3 = num(key, value)?,
            "ot" => self.weights.ot = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "mode" => self.mode = TrainMode::parse(value)?,
            "beta1" => self.beta1 = num(key, value)?,
            "beta2" => self.beta2 = num(key, value)?,
            "eps" => self.eps = num(key, value)?,
            "lr_decay_epoch" => {
                self.lr_decay_epoch = match value {
                    "" | "none" | "off" => None,
                    v => Some(num(key, v)?),
                }
            }
            "lr_decay_factor" => self.lr_decay_factor = num(key, value)?,
            "net" => {
                NetConfig::preset(value)?;
                self.net = value.to_string();
            }
            "finetune_with_syn" => self.finetune_with_syn = num(key, value)?,
            other => return Err(config_err!("unknown config key {other:?}")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "lr" => self.lr.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "real_fraction" => self.real_fraction.to_string(),
            "lambda1" => self.weights.lambda1.to_string(),
            "lambda2" => self.weights.lambda2.to_string(),
            "lambda3" => self.weights.lambda3.to_string(),
            "ot" => self.weights.ot.to_string(),
            "seed" => self.seed.to_string(),
            "mode" => self.mode.name().to_string(),
            "beta1" => self.beta1.to_string(),
            "beta2" => self.beta2.to_string(),
            "eps" => self.eps.to_string(),
            "lr_decay_epoch" => self.lr_decay_epoch.map_or("none".to_string(), |e| e.to_string()),
            "lr_decay_factor" => self.lr_decay_factor.to_string(),
            "net" => self.net.clone(),
            "finetune_with_syn" => self.finetune_with_syn.to_string(),
            other => return Err(config_err!("unknown config key {other:?}")),
        })
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| config_err!("line {}: expected key = value, got {raw:?}", no + 1))?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => config_err!("line {}: {msg}", no + 1),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// Every key, one `key = value` line each.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for key in CONFIG_KEYS {
            let _ = writeln!(out, "{key} = {}", self.get(key).expect("listed key"));
        }
        out
    }
}
