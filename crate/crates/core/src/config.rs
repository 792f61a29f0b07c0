//! Model and training configuration.

use serde::{Deserialize, Serialize};

pub use crate::attention::AttentionMode;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingMode {
    /// Trainable amplitudes and phases.
    #[default]
    Complex,
    /// Phases fixed at zero; the phase GRU is not used.
    Real,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    #[default]
    Adam,
}

/// Hyperparameters shared by the model, the trainer and the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Dimension of the word space.
    pub d: usize,
    /// Width of the attention maps.
    pub k: usize,
    /// Number of measurement states.
    pub z: usize,
    pub max_tokens: usize,
    pub max_sentences: usize,
    pub max_comments: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub attention_mode: AttentionMode,
    pub embedding_mode: EmbeddingMode,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            d: 8,
            k: 8,
            z: 16,
            max_tokens: 32,
            max_sentences: 8,
            max_comments: 32,
            learning_rate: 1e-3,
            epochs: 20,
            seed: 0,
            attention_mode: AttentionMode::Signed,
            embedding_mode: EmbeddingMode::Complex,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d", self.d),
            ("k", self.k),
            ("z", self.z),
            ("max_tokens", self.max_tokens),
            ("max_sentences", self.max_sentences),
            ("max_comments", self.max_comments),
        ] {
            if v == 0 {
                return Err(Error::Argument(format!("config `{name}` must be positive")));
            }
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Argument(format!(
                "config `learning_rate` must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }

    /// Classifier input width: one measurement vector per feature matrix.
    pub fn classifier_width(&self) -> usize {
        2 * self.attention_mode.channels() * self.z
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Argument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
