//! Small from-scratch sequence models: the persona encoder, the dialogue
//! decoder with key/value prefix conditioning, and gradient checking.

mod decoder;
mod encoder;
mod gradcheck;
mod layers;

use ndarray::Array1;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Matrix;
use crate::error::{MorpheusError, Result};

pub use decoder::{DialogueDecoder, PrefixProjection, PrefixState, PrefixVars};
pub use encoder::PersonaEncoder;
pub use gradcheck::{gradcheck, GradcheckReport};
pub use layers::Block;

/// How prefix keys/values enter self-attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PrefixAttention {
    /// Prefix slots get their own softmax whose output is added to the
    /// ordinary attention output. A zero projection switches conditioning
    /// off exactly.
    #[default]
    Gated,
    /// Prefix slots are prepended to the keys/values of one shared softmax.
    Joint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Decoder layers.
    pub layers: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub max_sequence_length: usize,
    pub vocab_size: usize,
    pub ff_mult: usize,
    pub dropout: f64,
    pub prefix_attention: PrefixAttention,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            layers: 2,
            encoder_layers: 1,
            heads: 2,
            max_sequence_length: 128,
            vocab_size: 0,
            ff_mult: 4,
            dropout: 0.0,
            prefix_attention: PrefixAttention::Gated,
        }
    }
}

impl ModelConfig {
    /// GPT-2 small sized configuration (768 hidden, 12 layers, 12 heads).
    pub fn gpt2_scale(vocab_size: usize) -> Self {
        ModelConfig {
            d_model: 768,
            layers: 12,
            encoder_layers: 12,
            heads: 12,
            max_sequence_length: 512,
            vocab_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MorpheusError::InvalidArgument(m));
        if self.d_model == 0
            || self.layers == 0
            || self.encoder_layers == 0
            || self.heads == 0
            || self.max_sequence_length == 0
            || self.ff_mult == 0
        {
            return bad("model sizes must be positive".into());
        }
        if self.vocab_size <= crate::corpus::RESERVED.len() {
            return bad(format!("vocab_size {} leaves no ordinary tokens", self.vocab_size));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!(
                "d_model {} is not divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }
}

/// Encoding of one persona segment.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedPersona {
    pub vector: Array1<f64>,
    pub source_segment: String,
    pub code_index: Option<usize>,
}

/// Summary of a dialogue history: the decoder's final state at its last token.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenState {
    pub vector: Array1<f64>,
}

/// Dropout settings for a training-mode forward pass.
pub struct Dropout<'r> {
    pub rate: f64,
    pub rng: &'r mut dyn rand::RngCore,
}

impl Dropout<'_> {
    pub(crate) fn mask(&mut self, rows: usize, cols: usize) -> Matrix {
        let keep = 1.0 - self.rate;
        Matrix::from_shape_fn((rows, cols), |_| {
            if self.rng.gen::<f64>() < keep {
                1.0 / keep
            } else {
                0.0
            }
        })
    }
}

pub(crate) fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let dist = Normal::new(0.0, std).expect("positive std");
    Matrix::from_shape_fn((rows, cols), |_| dist.sample(rng))
}

pub(crate) const INIT_STD: f64 = 0.02;
