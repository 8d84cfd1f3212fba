use crate::config_text::{value, ConfigKeys};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub clip_norm: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Fraction of the provided data held out for early stopping.
    pub val_fraction: f64,
    /// Minimum drop in validation RMSE that counts as an improvement.
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-2,
            batch: 32,
            max_epochs: 100,
            patience: 15,
            clip_norm: 1.0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            val_fraction: 0.15,
            min_delta: 1e-4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [("lr", self.lr), ("clip_norm", self.clip_norm), ("adam_eps", self.adam_eps)];
        if let Some((n, v)) = pos.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidConfig(format!("{n} = {v} must be positive")));
        }
        if !(self.weight_decay >= 0.0) || !(self.min_delta >= 0.0) {
            return Err(Error::InvalidConfig("weight_decay and min_delta must be >= 0".into()));
        }
        if self.batch == 0 || self.max_epochs == 0 {
            return Err(Error::InvalidConfig("batch and max_epochs must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::InvalidConfig(format!("patience {} exceeds max_epochs {}", self.patience, self.max_epochs)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::InvalidConfig("adam betas must lie in [0, 1)".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!("val_fraction {} must lie in (0, 1)", self.val_fraction)));
        }
        Ok(())
    }
}

impl ConfigKeys for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<bool> {
        match key {
            "train.lr" => self.lr = value(key, v)?,
            "train.weight_decay" => self.weight_decay = value(key, v)?,
            "train.batch" => self.batch = value(key, v)?,
            "train.max_epochs" => self.max_epochs = value(key, v)?,
            "train.patience" => self.patience = value(key, v)?,
            "train.clip_norm" => self.clip_norm = value(key, v)?,
            "train.beta1" => self.beta1 = value(key, v)?,
            "train.beta2" => self.beta2 = value(key, v)?,
            "train.adam_eps" => self.adam_eps = value(key, v)?,
            "train.val_fraction" => self.val_fraction = value(key, v)?,
            "train.min_delta" => self.min_delta = value(key, v)?,
            "train.seed" => self.seed = value(key, v)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(String, String)> {
        [
            ("train.lr", self.lr.to_string()),
            ("train.weight_decay", self.weight_decay.to_string()),
            ("train.batch", self.batch.to_string()),
            ("train.max_epochs", self.max_epochs.to_string()),
            ("train.patience", self.patience.to_string()),
            ("train.clip_norm", self.clip_norm.to_string()),
            ("train.beta1", self.beta1.to_string()),
            ("train.beta2", self.beta2.to_string()),
            ("train.adam_eps", self.adam_eps.to_string()),
            ("train.val_fraction", self.val_fraction.to_string()),
            ("train.min_delta", self.min_delta.to_string()),
            ("train.seed", self.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}
