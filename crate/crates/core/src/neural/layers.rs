use rand::Rng;

use super::{normal_matrix, Dropout, ModelConfig, PrefixAttention, INIT_STD};
use crate::autograd::{Graph, Mask, Matrix, ParamId, ParamStore, Var};

/// Pre-norm transformer block: attention then a GELU feed-forward layer,
/// each wrapped in a residual connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Block {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Prefix keys and values for one layer, each `M×d`.
pub(crate) struct LayerPrefix {
    pub keys: Var,
    pub values: Var,
}

pub(crate) fn layer_norm_params(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (
        store.add(format!("{name}.g"), Matrix::ones((1, d))),
        store.add(format!("{name}.b"), Matrix::zeros((1, d))),
    )
}

impl Block {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, total_layers: usize, rng: &mut impl Rng) -> Self {
        let d = cfg.d_model;
        let ff = d * cfg.ff_mult;
        let resid_std = INIT_STD / (2.0 * total_layers as f64).sqrt();
        let mut lin = |suffix: &str, rows: usize, cols: usize, std: f64| {
            let w = store.add(format!("{name}.{suffix}.w"), normal_matrix(rng, rows, cols, std));
            let b = store.add(format!("{name}.{suffix}.b"), Matrix::zeros((1, cols)));
            (w, b)
        };
        let (wq, bq) = lin("attn.q", d, d, INIT_STD);
        let (wk, bk) = lin("attn.k", d, d, INIT_STD);
        let (wv, bv) = lin("attn.v", d, d, INIT_STD);
        let (wo, bo) = lin("attn.o", d, d, resid_std);
        let (w1, b1) = lin("mlp.fc", d, ff, INIT_STD);
        let (w2, b2) = lin("mlp.proj", ff, d, resid_std);
        let (ln1_g, ln1_b) = layer_norm_params(store, &format!("{name}.ln1"), d);
        let (ln2_g, ln2_b) = layer_norm_params(store, &format!("{name}.ln2"), d);
        Block {
            ln1_g,
            ln1_b,
            wq,
            bq,
            wk,
            bk,
            wv,
            bv,
            wo,
            bo,
            ln2_g,
            ln2_b,
            w1,
            b1,
            w2,
            b2,
        }
    }

    fn linear(g: &mut Graph, x: Var, w: ParamId, b: ParamId) -> Var {
        let wv = g.param(w);
        let bv = g.param(b);
        let y = g.matmul(x, wv);
        g.add_row(y, bv)
    }

    fn dropout(g: &mut Graph, x: Var, dropout: &mut Option<Dropout>) -> Var {
        match dropout {
            Some(d) if d.rate > 0.0 => {
                let (r, c) = g.value(x).dim();
                let mask = g.constant(d.mask(r, c));
                g.mul(x, mask)
            }
            _ => x,
        }
    }

    /// `x` is `T×d`. `causal` selects decoder (masked) or encoder attention.
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        cfg: &ModelConfig,
        x: Var,
        causal: bool,
        prefix: Option<&LayerPrefix>,
        dropout: &mut Option<Dropout>,
    ) -> Var {
        let ln1g = g.param(self.ln1_g);
        let ln1b = g.param(self.ln1_b);
        let h = g.layer_norm(x, ln1g, ln1b);
        let q = Self::linear(g, h, self.wq, self.bq);
        let k = Self::linear(g, h, self.wk, self.bk);
        let v = Self::linear(g, h, self.wv, self.bv);

        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let self_mask = if causal {
            Mask::Causal { offset: 0 }
        } else {
            Mask::None
        };
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let (lo, hi) = (head * dh, (head + 1) * dh);
            let qh = g.slice_cols(q, lo, hi);
            let kh = g.slice_cols(k, lo, hi);
            let vh = g.slice_cols(v, lo, hi);
            let out = match (prefix, cfg.prefix_attention) {
                (None, _) => attend(g, qh, kh, vh, scale, self_mask),
                (Some(p), PrefixAttention::Gated) => {
                    let own = attend(g, qh, kh, vh, scale, self_mask);
                    let pk = g.slice_cols(p.keys, lo, hi);
                    let pv = g.slice_cols(p.values, lo, hi);
                    let extra = attend(g, qh, pk, pv, scale, Mask::None);
                    g.add(own, extra)
                }
                (Some(p), PrefixAttention::Joint) => {
                    let pk = g.slice_cols(p.keys, lo, hi);
                    let pv = g.slice_cols(p.values, lo, hi);
                    let m = g.value(pk).nrows();
                    let kk = g.concat_rows(&[pk, kh]);
                    let vv = g.concat_rows(&[pv, vh]);
                    let mask = if causal {
                        Mask::Causal { offset: m }
                    } else {
                        Mask::None
                    };
                    attend(g, qh, kk, vv, scale, mask)
                }
            };
            heads.push(out);
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)
        };
        let attn = Self::linear(g, merged, self.wo, self.bo);
        let attn = Self::dropout(g, attn, dropout);
        let x = g.add(x, attn);

        let ln2g = g.param(self.ln2_g);
        let ln2b = g.param(self.ln2_b);
        let h = g.layer_norm(x, ln2g, ln2b);
        let h = Self::linear(g, h, self.w1, self.b1);
        let h = g.gelu(h);
        let h = Self::linear(g, h, self.w2, self.b2);
        let h = Self::dropout(g, h, dropout);
        g.add(x, h)
    }
}

fn attend(g: &mut Graph, q: Var, k: Var, v: Var, scale: f64, mask: Mask) -> Var {
    let scores = g.matmul_t(q, k);
    let scores = g.scale(scores, scale);
    let weights = g.softmax(scores, mask);
    g.matmul(weights, v)
}

/// Token plus learned position embeddings for `ids`.
pub(crate) fn embed(
    g: &mut Graph,
    tok_emb: ParamId,
    pos_emb: ParamId,
    ids: &[usize],
    dropout: &mut Option<Dropout>,
) -> Var {
    let table = g.param(tok_emb);
    let tok = g.gather(table, ids);
    let pos_table = g.param(pos_emb);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = g.gather(pos_table, &positions);
    let x = g.add(tok, pos);
    Block::dropout(g, x, dropout)
}
