//! Engine-wide configuration with defaults and a flat TOML-style file form.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clustering::KMeansParams;
use crate::inference::InferOptions;
use crate::losses::LossWeights;
use crate::scorer::ScorerConfig;

#[derive(Debug, Error, PartialEq)]
#[error("invalid configuration: {0}")]
pub struct ConfigError(pub String);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineConfig {
    pub alpha: f64,
    pub k: usize,
    pub top_m: usize,
    pub num_super: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub focal_gamma: f64,
    pub focal_balance: f64,
    pub softmax_temperature: f64,
    pub iou_thresh: f64,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            alpha: 0.25,
            k: 3,
            top_m: 100,
            num_super: 30,
            lambda1: 2.0,
            lambda2: 1.0,
            lambda3: 20.0,
            focal_gamma: 2.0,
            focal_balance: 0.25,
            softmax_temperature: 1.0,
            iou_thresh: 0.5,
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let err = |m: &str| Err(ConfigError(m.to_string()));
        if !(0.0..=1.0).contains(&self.alpha) {
            return err("alpha must lie in [0, 1]");
        }
        if self.k == 0 {
            return err("k must be at least 1");
        }
        if self.top_m == 0 {
            return err("top_m must be at least 1");
        }
        if self.num_super == 0 {
            return err("num_super must be at least 1");
        }
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !v.is_finite() || v < 0.0 {
                return err(&format!("{name} must be finite and non-negative"));
            }
        }
        if !self.focal_gamma.is_finite() || self.focal_gamma < 0.0 {
            return err("focal_gamma must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.focal_balance) {
            return err("focal_balance must lie in [0, 1]");
        }
        if !self.softmax_temperature.is_finite() || self.softmax_temperature <= 0.0 {
            return err("softmax_temperature must be positive");
        }
        if !(0.0..=1.0).contains(&self.iou_thresh) {
            return err("iou_thresh must lie in [0, 1]");
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scorer(&self) -> ScorerConfig {
        ScorerConfig {
            alpha: self.alpha,
            k: self.k,
            softmax_temperature: self.softmax_temperature,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
            lambda3: self.lambda3,
        }
    }

    pub fn infer_options(&self) -> InferOptions {
        InferOptions {
            top_m: self.top_m,
            temperature: self.softmax_temperature,
            ..Default::default()
        }
    }

    pub fn kmeans(&self) -> KMeansParams {
        KMeansParams::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = EngineConfig::default();
        assert_eq!((c.alpha, c.k, c.top_m, c.num_super), (0.25, 3, 100, 30));
        assert_eq!(c.loss_weights(), LossWeights::default());
        assert!(c.validate().is_ok());
    }

    #[test]
    fn partial_file_overrides() {
        let c = EngineConfig::from_toml("alpha = 0.5\nseed = 7\n").unwrap();
        assert_eq!((c.alpha, c.seed, c.k), (0.5, 7, 3));
    }

    #[test]
    fn rejects_unknown_and_out_of_range() {
        assert!(EngineConfig::from_toml("alpah = 0.5").is_err());
        assert!(EngineConfig::from_toml("alpha = 1.5").is_err());
        assert!(EngineConfig::from_toml("k = 0").is_err());
        assert!(EngineConfig::from_toml("softmax_temperature = 0.0").is_err());
    }
}
