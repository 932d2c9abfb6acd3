//! Schema-versioned experiment configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lora::{LoraInjectionSpec, RankVector};
use crate::losses::LossConfig;
use crate::metrics::DepthEvalConfig;
use crate::model::ModelConfig;
use crate::synth::SceneConfig;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay_every: usize,
    pub lr_decay_factor: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Source frames relative to the centre frame.
    pub frame_offsets: Vec<i64>,
    /// Trailing fraction of frames held out for validation.
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            lr_decay_every: 10,
            lr_decay_factor: 0.1,
            epochs: 50,
            batch_size: 4,
            seed: 0,
            frame_offsets: vec![-1, 1],
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be non-negative, got {}", self.lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return Err(Error::Config("train.epochs, train.batch_size and train.lr_decay_every must be >= 1".into()));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "train.lr_decay_factor must be in (0, 1], got {}",
                self.lr_decay_factor
            )));
        }
        if self.frame_offsets.is_empty() || self.frame_offsets.contains(&0) {
            return Err(Error::Config("train.frame_offsets must be non-empty and exclude 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config(format!("train.val_fraction must be in [0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }

    /// `lr₀ · factor^⌊epoch / decay_every⌋`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}

fn default_lora() -> Option<LoraInjectionSpec> {
    Some(LoraInjectionSpec::new(RankVector::decreasing_12()))
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig::terrain(64, 64, 200, 0)
    }
}

/// Everything needed to reproduce a run. `lora: null` keeps the encoder frozen without adapters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub loss: LossConfig,
    #[serde(default = "default_lora")]
    pub lora: Option<LoraInjectionSpec>,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub eval: DepthEvalConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            scene: SceneConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            lora: default_lora(),
            model: ModelConfig::default(),
            eval: DepthEvalConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                Error::Config(inner.to_string())
            } else {
                Error::Config(format!("{path}: {inner}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.scene.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.model.validate()?;
        if let Some(l) = &self.lora {
            l.validate(self.model.encoder.blocks)?;
        }
        Ok(())
    }

    /// SHA-256 over the compact JSON form.
    pub fn hash(&self) -> [u8; 32] {
        sha256(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    /// Hash of the parts that determine the parameter layout.
    pub fn architecture_hash(&self) -> [u8; 32] {
        let arch = serde_json::json!({ "model": self.model, "lora": self.lora });
        sha256(arch.to_string().as_bytes())
    }
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(ExperimentConfig::from_json("{}").unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_versions_rejected() {
        let err = ExperimentConfig::from_json(r#"{"trian": {}}"#).unwrap_err();
        assert!(err.to_string().contains("trian"), "{err}");
        assert!(ExperimentConfig::from_json(r#"{"train": {"lr": 1e-3, "momentum": 0.9}}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"schema_version": 2}"#).is_err());
        let err = ExperimentConfig::from_json(r#"{"scene": {"kind": "sphere", "width": 64, "height": 64, "n_frames": 3, "motion": {"constant": [0,0,0,0,0,0]}}}"#).unwrap_err();
        assert!(err.to_string().contains("sphere"), "{err}");
        assert!(err.to_string().contains("scene.kind"), "{err}");
    }

    #[test]
    fn rank_vector_must_match_blocks() {
        let err = ExperimentConfig::from_json(r#"{"lora": {"rank_vector": [4, 4]}}"#).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(ExperimentConfig::from_json(r#"{"lora": null}"#).unwrap().lora.is_none());
    }

    #[test]
    fn schedule_arithmetic() {
        let t = TrainConfig { lr: 1e-4, lr_decay_every: 1, lr_decay_factor: 0.1, epochs: 2, ..TrainConfig::default() };
        assert_eq!(t.lr_at(0), 1e-4);
        assert!((t.lr_at(1) - 1e-5).abs() < 1e-20);
        let d = TrainConfig::default();
        assert_eq!(d.lr_at(9), 1e-4);
        assert!((d.lr_at(10) - 1e-5).abs() < 1e-20);
        assert!((d.lr_at(49) - 1e-8).abs() < 1e-22);
    }
}
