use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codebook::InitStrategy;
use crate::error::{MorpheusError, Result};
use crate::neural::{ModelConfig, PrefixAttention};

/// Every knob of a training run. Serialized as flat TOML key/value pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    /// Codebook size `N`.
    pub codebook_size: usize,
    /// Persona segments per sample `M`.
    pub segments: usize,
    pub d_model: usize,
    pub layers: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub max_sequence_length: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub prefix_attention: PrefixAttention,
    pub beta: f64,
    pub tau: f64,
    pub lambda_g: f64,
    pub lambda_v: f64,
    pub lambda_d: f64,
    pub lambda_c: f64,
    /// Peak learning rate, reached at the end of warmup.
    pub learning_rate: f64,
    pub warmup_steps: u64,
    pub batch_size: usize,
    pub stage1_epochs: usize,
    pub stage3_epochs: usize,
    pub seed: u64,
    pub init_strategy: InitStrategy,
    pub peft: bool,
    /// Condition generation on persona prefixes. Off gives the plain
    /// language-model baseline.
    pub prefix: bool,
    /// Build the training prefix from quantized codes, passing gradients
    /// straight through to the encoder.
    pub straight_through: bool,
    /// Alternate code-prediction and codebook updates instead of summing.
    pub alternating: bool,
    pub nucleus_p: f64,
    pub temperature: f64,
    pub max_response_tokens: usize,
    pub em_max_iters: usize,
    pub em_tol: f64,
    pub vocab_min_count: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        TrainingConfig {
            codebook_size: 100,
            segments: 4,
            d_model: model.d_model,
            layers: model.layers,
            encoder_layers: model.encoder_layers,
            heads: model.heads,
            max_sequence_length: model.max_sequence_length,
            ff_mult: model.ff_mult,
            dropout: model.dropout,
            prefix_attention: model.prefix_attention,
            beta: 0.05,
            tau: 0.5,
            lambda_g: 1.0,
            lambda_v: 1.0,
            lambda_d: 1.0,
            lambda_c: 1.0,
            learning_rate: 1e-4,
            warmup_steps: 20,
            batch_size: 16,
            stage1_epochs: 3,
            stage3_epochs: 3,
            seed: 0,
            init_strategy: InitStrategy::Em,
            peft: false,
            prefix: true,
            straight_through: false,
            alternating: false,
            nucleus_p: 0.9,
            temperature: 1.0,
            max_response_tokens: 32,
            em_max_iters: 200,
            em_tol: 1e-6,
            vocab_min_count: 1,
        }
    }
}

impl TrainingConfig {
    /// The configuration of the unconditioned baseline: no prefix and only
    /// the generation loss.
    pub fn baseline(&self) -> Self {
        TrainingConfig {
            prefix: false,
            lambda_v: 0.0,
            lambda_d: 0.0,
            lambda_c: 0.0,
            ..self.clone()
        }
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            layers: self.layers,
            encoder_layers: self.encoder_layers,
            heads: self.heads,
            max_sequence_length: self.max_sequence_length,
            vocab_size,
            ff_mult: self.ff_mult,
            dropout: self.dropout,
            prefix_attention: self.prefix_attention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MorpheusError::InvalidArgument(m));
        if self.codebook_size == 0 || self.segments == 0 {
            return bad("codebook_size and segments must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, v) in [
            ("beta", self.beta),
            ("tau", self.tau),
            ("learning_rate", self.learning_rate),
            ("temperature", self.temperature),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("lambda_g", self.lambda_g),
            ("lambda_v", self.lambda_v),
            ("lambda_d", self.lambda_d),
            ("lambda_c", self.lambda_c),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(self.nucleus_p > 0.0 && self.nucleus_p <= 1.0) {
            return bad(format!("nucleus_p must lie in (0, 1], got {}", self.nucleus_p));
        }
        if self.max_response_tokens == 0 {
            return bad("max_response_tokens must be positive".into());
        }
        if self.em_tol.is_nan() || self.em_tol < 0.0 {
            return bad(format!("em_tol must be non-negative, got {}", self.em_tol));
        }
        self.model_config(crate::corpus::RESERVED.len() + 1).validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainingConfig =
            toml::from_str(text).map_err(|e| MorpheusError::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MorpheusError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
