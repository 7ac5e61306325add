use ndarray::Array1;
use rand::Rng;

use super::layers::{embed, layer_norm_params, Block};
use super::{normal_matrix, Dropout, EncodedPersona, ModelConfig, INIT_STD};
use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::corpus::{words, Vocab};
use crate::error::{MorpheusError, Result};

/// Bidirectional transformer encoder whose mean-pooled final states are the
/// persona representation of one segment. The empty segment maps to a
/// learned null vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PersonaEncoder {
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    null: ParamId,
}

impl PersonaEncoder {
    pub const PREFIX: &'static str = "encoder.";

    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let tok_emb = store.add("encoder.tok_emb", normal_matrix(rng, cfg.vocab_size, d, INIT_STD));
        let pos_emb = store.add(
            "encoder.pos_emb",
            normal_matrix(rng, cfg.max_sequence_length, d, INIT_STD),
        );
        let blocks = (0..cfg.encoder_layers)
            .map(|l| Block::new(store, &format!("encoder.layer{l}"), cfg, cfg.encoder_layers, rng))
            .collect();
        let ln_f = layer_norm_params(store, "encoder.ln_f", d);
        let null = store.add("encoder.null", normal_matrix(rng, 1, d, 1.0));
        PersonaEncoder {
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            null,
        }
    }

    /// Token ids of a segment; empty for the padding segment.
    pub fn segment_ids(vocab: &Vocab, cfg: &ModelConfig, segment: &str) -> Result<Vec<usize>> {
        if words(segment).is_empty() {
            return Ok(Vec::new());
        }
        let ids = vocab.tokenize(segment)?;
        if ids.len() > cfg.max_sequence_length {
            return Err(MorpheusError::SequenceOverflow {
                len: ids.len(),
                max: cfg.max_sequence_length,
            });
        }
        Ok(ids)
    }

    /// `1×d` representation of the segment with token ids `ids`.
    pub fn forward(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        ids: &[usize],
        dropout: &mut Option<Dropout>,
    ) -> Var {
        if ids.is_empty() {
            return g.param(self.null);
        }
        let mut x = embed(g, self.tok_emb, self.pos_emb, ids, dropout);
        for block in &self.blocks {
            x = block.forward(g, cfg, x, false, None, dropout);
        }
        let lg = g.param(self.ln_f.0);
        let lb = g.param(self.ln_f.1);
        let x = g.layer_norm(x, lg, lb);
        g.mean_rows(x)
    }

    /// Evaluation-mode encoding of one segment.
    pub fn encode(
        &self,
        store: &ParamStore,
        cfg: &ModelConfig,
        vocab: &Vocab,
        segment: &str,
    ) -> Result<EncodedPersona> {
        let ids = Self::segment_ids(vocab, cfg, segment)?;
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, cfg, &ids, &mut None);
        let vector: Array1<f64> = g.value(out).row(0).to_owned();
        Ok(EncodedPersona {
            vector,
            source_segment: segment.to_string(),
            code_index: None,
        })
    }

    pub fn null_vector(&self, store: &ParamStore) -> Array1<f64> {
        store.get(self.null).row(0).to_owned()
    }
}
