//! Experiment configuration.
//!
//! A run's configuration is built by layering JSON objects: built-in
//! defaults, then a named dataset preset, then the user's config file, then
//! command-line overrides. Unknown keys are rejected at every layer.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::augment::AugmentationConfig;
use crate::data::{SplitSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::nn::{EncoderConfig, MLPHeadConfig, NetworkSpec, TCNHeadConfig};
use crate::objective::LossWeights;
use crate::optim::AdamConfig;

const PRESETS: &str = include_str!("presets.json");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub lambda: f64,
    pub dropout: f64,
    pub seed: u64,
    /// Also regress the target view's prediction onto the online view's
    /// projection and average both directions.
    pub symmetric_loss: bool,
    pub disable_tcn_head: bool,
    pub disable_mlp_head: bool,
    pub encoder: EncoderConfig,
    pub tcn: TCNHeadConfig,
    pub mlp: MLPHeadConfig,
    pub augmentation: AugmentationConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 128,
            lr: 3e-4,
            weight_decay: 3e-4,
            beta1: 0.9,
            beta2: 0.99,
            tau: 0.996,
            lambda: 0.51,
            dropout: 0.35,
            seed: 0,
            symmetric_loss: false,
            disable_tcn_head: false,
            disable_mlp_head: false,
            encoder: EncoderConfig::default(),
            tcn: TCNHeadConfig::default(),
            mlp: MLPHeadConfig::default(),
            augmentation: AugmentationConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2 for batch normalization".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0,1], got {}", self.tau)));
        }
        if self.disable_tcn_head && self.disable_mlp_head {
            return Err(Error::Config("disable_tcn_head and disable_mlp_head cannot both be set".into()));
        }
        LossWeights::new(self.lambda)?;
        self.augmentation.validate()?;
        let mut enc = self.encoder.clone();
        enc.dropout = self.dropout;
        enc.validate()?;
        self.tcn.validate()?;
        self.mlp.validate()
    }

    pub fn optimizer(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn loss_weights(&self) -> Result<LossWeights> {
        LossWeights::new(self.lambda)
    }

    pub fn network_spec(&self, in_channels: usize, length: usize) -> NetworkSpec {
        NetworkSpec {
            in_channels,
            length,
            encoder: EncoderConfig {
                dropout: self.dropout,
                ..self.encoder.clone()
            },
            tcn: (!self.disable_tcn_head).then(|| self.tcn.clone()),
            mlp: (!self.disable_mlp_head).then(|| self.mlp.clone()),
        }
    }
}

/// Downstream (probe / fine-tuning) training. Optimizer betas and weight
/// decay follow [`TrainConfig`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        DownstreamConfig {
            epochs: 40,
            batch_size: 128,
            lr: 3e-4,
        }
    }
}

/// How the train/val/test partitions are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    /// Use the partitions stored in the dataset directory as-is.
    Published,
    /// Pool every stored partition and re-split with `split` fractions.
    Resplit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub lambda_grid: Vec<f64>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0, 1, 2],
            lambda_grid: vec![0.005, 0.5, 5.0, 500.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Option<String>,
    pub dataset: String,
    pub split_mode: SplitMode,
    pub split: SplitSpec,
    pub train: TrainConfig,
    pub downstream: DownstreamConfig,
    pub ablation: AblationConfig,
    pub synthetic: SyntheticSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            preset: None,
            dataset: "custom".into(),
            split_mode: SplitMode::Published,
            split: SplitSpec::default(),
            train: TrainConfig::default(),
            downstream: DownstreamConfig::default(),
            ablation: AblationConfig::default(),
            synthetic: SyntheticSpec::default(),
        }
    }
}

/// Recursively overlay `top` onto `base`.
pub fn merge_json(base: &mut Value, top: &Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

pub fn preset_names() -> Vec<String> {
    let v: Value = serde_json::from_str(PRESETS).expect("built-in presets are valid JSON");
    v.as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default()
}

fn preset_json(name: &str) -> Result<Value> {
    let v: Value = serde_json::from_str(PRESETS).expect("built-in presets are valid JSON");
    v.get(name)
        .cloned()
        .ok_or_else(|| Error::Config(format!("unknown preset '{name}' (available: {})", preset_names().join(", "))))
}

impl ExperimentConfig {
    /// Defaults overlaid with a named preset.
    pub fn preset(name: &str) -> Result<Self> {
        Self::from_value(serde_json::json!({ "preset": name }))
    }

    /// Defaults, then the preset named by `user["preset"]` (if any), then `user`.
    pub fn from_value(user: Value) -> Result<Self> {
        let mut merged = serde_json::to_value(ExperimentConfig::default())?;
        if let Some(name) = user.get("preset").and_then(Value::as_str) {
            merge_json(&mut merged, &preset_json(name)?);
        }
        merge_json(&mut merged, &user);
        let cfg: ExperimentConfig =
            serde_json::from_value(merged).map_err(|e| Error::Config(format!("invalid configuration: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
        let user: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("config file {} is not valid JSON: {e}", path.display())))?;
        Self::from_value(user)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.split.validate()?;
        if self.downstream.epochs < 1 || self.downstream.batch_size < 2 || !(self.downstream.lr > 0.0) {
            return Err(Error::Config("downstream needs epochs >= 1, batch_size >= 2 and lr > 0".into()));
        }
        Ok(())
    }

    /// Stable digest of the full configuration.
    pub fn hash(&self) -> String {
        config_hash(self)
    }
}

/// First 16 hex digits of SHA-256 over the canonical JSON encoding.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("configs serialize");
    let digest = Sha256::digest(json.as_bytes());
    digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_optimizer_settings() {
        let t = TrainConfig::default();
        assert_eq!((t.lr, t.weight_decay, t.beta1, t.beta2), (3e-4, 3e-4, 0.9, 0.99));
        assert_eq!((t.lambda, t.dropout), (0.51, 0.35));
    }

    #[test]
    fn presets_layer_over_defaults() {
        for name in preset_names() {
            ExperimentConfig::preset(&name).unwrap();
        }
        let sleep = ExperimentConfig::preset("sleep_edf").unwrap();
        assert_eq!((sleep.train.epochs, sleep.downstream.epochs, sleep.train.batch_size), (20, 40, 150));
        let ecg = ExperimentConfig::preset("ecg_medh").unwrap();
        assert_eq!((ecg.train.epochs, ecg.downstream.epochs), (50, 50));
        let syn = ExperimentConfig::from_value(serde_json::json!({
            "preset": "synthetic",
            "train": { "lambda": 0.5 }
        }))
        .unwrap();
        assert_eq!(syn.train.lambda, 0.5);
        assert_eq!(syn.train.encoder.channels_per_block, vec![16, 32, 32]);
        assert_eq!(syn.train.encoder.blocks, 3);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(
            ExperimentConfig::from_value(serde_json::json!({ "train": { "epochz": 3 } })),
            Err(Error::Config(_))
        ));
        assert!(ExperimentConfig::from_value(serde_json::json!({ "train": { "epochs": 0 } })).is_err());
        assert!(ExperimentConfig::from_value(serde_json::json!({
            "train": { "disable_tcn_head": true, "disable_mlp_head": true }
        }))
        .is_err());
        assert!(ExperimentConfig::preset("nope").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.train.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
