use ndarray::{Array1, Axis};
use rand::Rng;

use super::layers::{embed, layer_norm_params, Block, LayerPrefix};
use super::{normal_matrix, Dropout, ModelConfig, INIT_STD};
use crate::autograd::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::corpus::{BOR_ID, EOR_ID};
use crate::error::{MorpheusError, Result};

/// Causal transformer language model over dialogue tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueDecoder {
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    ln_f: (ParamId, ParamId),
    w_out: ParamId,
    b_out: ParamId,
}

/// Per-layer linear maps from persona vectors to prefix keys and values.
/// There is no bias, so a zero vector yields a zero prefix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PrefixProjection {
    keys: Vec<ParamId>,
    values: Vec<ParamId>,
}

/// Prefix inside a graph, one entry per decoder layer.
pub struct PrefixVars {
    pub(crate) layers: Vec<LayerPrefix>,
}

impl PrefixVars {
    pub fn len(&self, g: &Graph) -> usize {
        self.layers.first().map_or(0, |l| g.value(l.keys).nrows())
    }

    pub fn is_empty(&self, g: &Graph) -> bool {
        self.len(g) == 0
    }

    /// Brings an evaluated prefix into `g` as constants.
    pub fn from_state(g: &mut Graph, state: &PrefixState) -> Self {
        PrefixVars {
            layers: state
                .keys
                .iter()
                .zip(&state.values)
                .map(|(k, v)| LayerPrefix {
                    keys: g.constant(k.clone()),
                    values: g.constant(v.clone()),
                })
                .collect(),
        }
    }
}

/// Evaluated prefix: per-layer `M×d` keys and values.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefixState {
    pub keys: Vec<Matrix>,
    pub values: Vec<Matrix>,
}

impl PrefixState {
    /// Prefix length (number of slots).
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, Matrix::nrows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }
}

impl PrefixProjection {
    pub const PREFIX: &'static str = "prefix.";

    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let std = 1.0 / d as f64;
        let mut keys = Vec::with_capacity(cfg.layers);
        let mut values = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            keys.push(store.add(format!("prefix.layer{l}.k"), normal_matrix(rng, d, d, std)));
            values.push(store.add(format!("prefix.layer{l}.v"), normal_matrix(rng, d, d, std)));
        }
        PrefixProjection { keys, values }
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.keys.iter().chain(&self.values).copied()
    }

    /// `vectors` is `M×d`; slot order follows row order.
    pub fn build(&self, g: &mut Graph, vectors: Var) -> PrefixVars {
        let layers = self
            .keys
            .iter()
            .zip(&self.values)
            .map(|(&k, &v)| {
                let wk = g.param(k);
                let wv = g.param(v);
                LayerPrefix {
                    keys: g.matmul(vectors, wk),
                    values: g.matmul(vectors, wv),
                }
            })
            .collect();
        PrefixVars { layers }
    }

    /// Evaluation-mode prefix from exactly `m` vectors of dimension `d`.
    pub fn build_state(
        &self,
        store: &ParamStore,
        cfg: &ModelConfig,
        vectors: &[Array1<f64>],
        m: usize,
    ) -> Result<PrefixState> {
        let p = stack_vectors(vectors, m, cfg.d_model)?;
        let mut g = Graph::new(store);
        let pv = g.constant(p);
        let vars = self.build(&mut g, pv);
        Ok(PrefixState {
            keys: vars.layers.iter().map(|l| g.value(l.keys).clone()).collect(),
            values: vars.layers.iter().map(|l| g.value(l.values).clone()).collect(),
        })
    }
}

/// Stacks `m` vectors of length `d` into an `m×d` matrix.
pub(crate) fn stack_vectors(vectors: &[Array1<f64>], m: usize, d: usize) -> Result<Matrix> {
    if vectors.len() != m {
        return Err(MorpheusError::InvalidArgument(format!(
            "prefix needs exactly {m} vectors, got {}",
            vectors.len()
        )));
    }
    let mut out = Matrix::zeros((m, d));
    for (i, v) in vectors.iter().enumerate() {
        if v.len() != d {
            return Err(MorpheusError::DimensionMismatch {
                expected: d,
                got: v.len(),
            });
        }
        out.row_mut(i).assign(v);
    }
    Ok(out)
}

impl DialogueDecoder {
    pub const PREFIX: &'static str = "decoder.";

    pub fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let tok_emb = store.add("decoder.tok_emb", normal_matrix(rng, cfg.vocab_size, d, INIT_STD));
        let pos_emb = store.add(
            "decoder.pos_emb",
            normal_matrix(rng, cfg.max_sequence_length, d, INIT_STD),
        );
        let blocks = (0..cfg.layers)
            .map(|l| Block::new(store, &format!("decoder.layer{l}"), cfg, cfg.layers, rng))
            .collect();
        let ln_f = layer_norm_params(store, "decoder.ln_f", d);
        let w_out = store.add("decoder.lm_head.w", normal_matrix(rng, d, cfg.vocab_size, INIT_STD));
        let b_out = store.add("decoder.lm_head.b", Matrix::zeros((1, cfg.vocab_size)));
        DialogueDecoder {
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            w_out,
            b_out,
        }
    }

    pub fn lm_head(&self) -> (ParamId, ParamId) {
        (self.w_out, self.b_out)
    }

    fn check_len(cfg: &ModelConfig, len: usize) -> Result<()> {
        if len == 0 {
            return Err(MorpheusError::InvalidArgument("empty token sequence".into()));
        }
        if len > cfg.max_sequence_length {
            return Err(MorpheusError::SequenceOverflow {
                len,
                max: cfg.max_sequence_length,
            });
        }
        Ok(())
    }

    /// Final-layer (normalized) states, `T×d`.
    pub fn hidden(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        ids: &[usize],
        prefix: Option<&PrefixVars>,
        dropout: &mut Option<Dropout>,
    ) -> Result<Var> {
        Self::check_len(cfg, ids.len())?;
        let mut x = embed(g, self.tok_emb, self.pos_emb, ids, dropout);
        for (l, block) in self.blocks.iter().enumerate() {
            let layer_prefix = prefix.map(|p| &p.layers[l]);
            x = block.forward(g, cfg, x, true, layer_prefix, dropout);
        }
        let lg = g.param(self.ln_f.0);
        let lb = g.param(self.ln_f.1);
        Ok(g.layer_norm(x, lg, lb))
    }

    pub fn logits(&self, g: &mut Graph, hidden: Var) -> Var {
        let w = g.param(self.w_out);
        let b = g.param(self.b_out);
        let y = g.matmul(hidden, w);
        g.add_row(y, b)
    }

    /// Mean teacher-forced negative log-likelihood of `response` followed by
    /// the end marker, given `context` then the begin-of-response marker.
    pub fn nll(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        context: &[usize],
        response: &[usize],
        prefix: Option<&PrefixVars>,
        dropout: &mut Option<Dropout>,
    ) -> Result<Var> {
        if response.is_empty() {
            return Err(MorpheusError::InvalidArgument("response is empty".into()));
        }
        let mut ids = Vec::with_capacity(context.len() + 1 + response.len());
        ids.extend_from_slice(context);
        ids.push(BOR_ID);
        ids.extend_from_slice(response);
        let hidden = self.hidden(g, cfg, &ids, prefix, dropout)?;
        let start = context.len();
        let h = g.slice_rows(hidden, start, ids.len());
        let logits = self.logits(g, h);
        let mut targets = response.to_vec();
        targets.push(EOR_ID);
        Ok(g.cross_entropy(logits, &targets))
    }

    /// Evaluation-mode next-token scores after `context`.
    pub fn logits_next(
        &self,
        store: &ParamStore,
        cfg: &ModelConfig,
        prefix: Option<&PrefixState>,
        context: &[usize],
    ) -> Result<Array1<f64>> {
        let mut g = Graph::new(store);
        let pv = prefix.map(|p| PrefixVars::from_state(&mut g, p));
        let hidden = self.hidden(&mut g, cfg, context, pv.as_ref(), &mut None)?;
        let last = g.slice_rows(hidden, context.len() - 1, context.len());
        let logits = self.logits(&mut g, last);
        Ok(g.value(logits).index_axis(Axis(0), 0).to_owned())
    }

    /// Final state at the last token, with no prefix.
    pub fn last_state(&self, g: &mut Graph, cfg: &ModelConfig, ids: &[usize]) -> Result<Var> {
        let hidden = self.hidden(g, cfg, ids, None, &mut None)?;
        Ok(g.slice_rows(hidden, ids.len() - 1, ids.len()))
    }
}
