//! Every tunable of a run in one serializable tree.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::retrieval::RetrievalLossConfig;
use crate::tensor::{Result, TensorError};
use crate::world::WorldConfig;

/// Weights of the per-query matching cost.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchCosts {
    pub l1: f64,
    pub giou: f64,
    pub conf: f64,
}

impl Default for MatchCosts {
    fn default() -> Self {
        Self {
            l1: 5.0,
            giou: 2.0,
            conf: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub retrieval: RetrievalLossConfig,
    /// Sliding-window lengths for temporal proposals (the whole video is always included).
    pub proposal_scales: Vec<usize>,
    pub matching: MatchCosts,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            retrieval: RetrievalLossConfig::default(),
            proposal_scales: vec![4, 3, 2],
            matching: MatchCosts::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub epochs: usize,
    /// Episodes in the training pool; one epoch visits each once.
    pub train_episodes: usize,
    /// Stop after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub decay_every: usize,
    /// Multiplier applied to the learning rate every `decay_every` epochs.
    pub decay_factor: f64,
    pub det_weight: f64,
    pub retr_weight: f64,
    /// Rescale the gradient to at most this global norm.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Sgd,
            epochs: 90,
            train_episodes: 500,
            max_steps: None,
            decay_every: 30,
            decay_factor: 0.1,
            det_weight: 1.0,
            retr_weight: 1.0,
            grad_clip: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(TensorError::invalid("TrainConfig", "learning_rate must be finite and nonnegative"));
        }
        if self.train_episodes < 2 || self.decay_every == 0 || !(self.decay_factor > 0.0) {
            return Err(TensorError::invalid(
                "TrainConfig",
                "need at least 2 training episodes, a positive decay period and a positive decay factor",
            ));
        }
        if self.det_weight < 0.0 || self.retr_weight < 0.0 {
            return Err(TensorError::invalid("TrainConfig", "loss weights must be nonnegative"));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        let full = self.epochs * self.train_episodes;
        self.max_steps.map_or(full, |m| m.min(full))
    }

    /// Learning rate in effect during `epoch` (0-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        self.learning_rate * self.decay_factor.powi((epoch / self.decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Evaluate on the held-out set every this many training steps.
    pub every: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            seed: 1_000_003,
            every: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeroConfig {
    pub world: WorldConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl HeroConfig {
    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.encoder.validate()?;
        self.model.retrieval.validate()?;
        self.train.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_hash() {
        let c = HeroConfig::default();
        c.validate().unwrap();
        assert_eq!(c.model.encoder.num_heads, 4);
        assert_eq!(c.model.retrieval.delta, 0.8);
        assert_eq!(c.hash(), HeroConfig::default().hash());
        assert_eq!(c.hash().len(), 64);
        let mut d = c.clone();
        d.model.retrieval.delta = 0.7;
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn json_roundtrip_with_missing_fields() {
        let c: HeroConfig = serde_json::from_str(r#"{"train": {"learning_rate": 0.01}}"#).unwrap();
        assert_eq!(c.train.learning_rate, 0.01);
        assert_eq!(c.train.epochs, 90);
        let back: HeroConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn step_decay() {
        let t = TrainConfig::default();
        assert_eq!(t.lr_at_epoch(0), 1e-4);
        assert_eq!(t.lr_at_epoch(29), 1e-4);
        assert!((t.lr_at_epoch(30) - 1e-5).abs() < 1e-18);
        assert!((t.lr_at_epoch(89) - 1e-6).abs() < 1e-19);
        assert_eq!(
            TrainConfig {
                max_steps: Some(7),
                ..t.clone()
            }
            .total_steps(),
            7
        );
        assert!(TrainConfig {
            learning_rate: f64::NAN,
            ..t
        }
        .validate()
        .is_err());
    }
}
