//! Code-index prediction from the dialogue-history state: a shared hidden
//! layer followed by one softmax head per persona slot.

use ndarray::{Array1, Axis};
use rand::Rng;

use crate::autograd::{Graph, Matrix, ParamId, ParamStore, Var};
use crate::error::{MorpheusError, Result};
use crate::neural::{normal_matrix, HiddenState};

/// Winning code of one head and its softmax probability.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodePrediction {
    pub index: usize,
    pub probability: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodeClassifier {
    hidden_w: ParamId,
    hidden_b: ParamId,
    heads: Vec<(ParamId, ParamId)>,
    codes: usize,
}

const CLASSIFIER_STD: f64 = 0.02;

impl CodeClassifier {
    pub const PREFIX: &'static str = "classifier.";

    /// `hidden` defaults to `2d`.
    pub fn new(
        store: &mut ParamStore,
        d: usize,
        codes: usize,
        slots: usize,
        hidden: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if d == 0 || codes == 0 || slots == 0 {
            return Err(MorpheusError::InvalidArgument(
                "classifier needs positive d, N and M".into(),
            ));
        }
        let h = hidden.unwrap_or(2 * d);
        let hidden_w = store.add("classifier.hidden.w", normal_matrix(rng, d, h, CLASSIFIER_STD));
        let hidden_b = store.add("classifier.hidden.b", Matrix::zeros((1, h)));
        let heads = (0..slots)
            .map(|m| {
                (
                    store.add(format!("classifier.head{m}.w"), normal_matrix(rng, h, codes, CLASSIFIER_STD)),
                    store.add(format!("classifier.head{m}.b"), Matrix::zeros((1, codes))),
                )
            })
            .collect();
        Ok(CodeClassifier {
            hidden_w,
            hidden_b,
            heads,
            codes,
        })
    }

    /// Recovers the parameter handles of a classifier already in `store`.
    pub fn from_store(store: &ParamStore) -> Result<Self> {
        let find = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| MorpheusError::MissingComponent(format!("parameter {name}")))
        };
        let hidden_w = find("classifier.hidden.w")?;
        let hidden_b = find("classifier.hidden.b")?;
        let mut heads = Vec::new();
        while let Some(w) = store.find(&format!("classifier.head{}.w", heads.len())) {
            let b = find(&format!("classifier.head{}.b", heads.len()))?;
            heads.push((w, b));
        }
        if heads.is_empty() {
            return Err(MorpheusError::MissingComponent("classifier heads".into()));
        }
        let codes = store.get(heads[0].0).ncols();
        Ok(CodeClassifier {
            hidden_w,
            hidden_b,
            heads,
            codes,
        })
    }

    pub fn slots(&self) -> usize {
        self.heads.len()
    }

    pub fn codes(&self) -> usize {
        self.codes
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.hidden_w, self.hidden_b];
        for &(w, b) in &self.heads {
            ids.push(w);
            ids.push(b);
        }
        ids
    }

    /// Per-head `B×N` logits for a `B×d` batch of history states.
    pub fn forward(&self, g: &mut Graph, c: Var) -> Vec<Var> {
        let w = g.param(self.hidden_w);
        let b = g.param(self.hidden_b);
        let h = g.matmul(c, w);
        let h = g.add_row(h, b);
        let h = g.gelu(h);
        self.heads
            .iter()
            .map(|&(w, b)| {
                let wv = g.param(w);
                let bv = g.param(b);
                let y = g.matmul(h, wv);
                g.add_row(y, bv)
            })
            .collect()
    }

    /// Mean over heads of the cross-entropy against `labels` (one per head).
    pub fn loss(&self, g: &mut Graph, c: Var, labels: &[usize]) -> Result<Var> {
        self.check_labels(labels)?;
        let logits = self.forward(g, c);
        let losses: Vec<Var> = logits
            .into_iter()
            .zip(labels)
            .map(|(l, &k)| g.cross_entropy(l, &[k]))
            .collect();
        let stacked = g.concat_cols(&losses);
        let total = g.sum(stacked);
        Ok(g.scale(total, 1.0 / labels.len() as f64))
    }

    fn check_labels(&self, labels: &[usize]) -> Result<()> {
        if labels.len() != self.slots() {
            return Err(MorpheusError::InvalidArgument(format!(
                "expected {} labels, got {}",
                self.slots(),
                labels.len()
            )));
        }
        if let Some(&k) = labels.iter().find(|&&k| k >= self.codes) {
            return Err(MorpheusError::InvalidArgument(format!(
                "label {k} out of range for N={}",
                self.codes
            )));
        }
        Ok(())
    }

    /// Evaluation-mode head logits for one history state.
    pub fn logits(&self, store: &ParamStore, c: &HiddenState) -> Result<Vec<Array1<f64>>> {
        let d = store.get(self.hidden_w).nrows();
        if c.vector.len() != d {
            return Err(MorpheusError::DimensionMismatch {
                expected: d,
                got: c.vector.len(),
            });
        }
        let mut g = Graph::new(store);
        let cv = g.constant(c.vector.clone().insert_axis(Axis(0)));
        let out = self.forward(&mut g, cv);
        Ok(out.into_iter().map(|v| g.value(v).row(0).to_owned()).collect())
    }

    pub fn predict(&self, store: &ParamStore, c: &HiddenState) -> Result<Vec<CodePrediction>> {
        Ok(predict_codes(&self.logits(store, c)?))
    }
}

fn softmax(logits: &Array1<f64>) -> Array1<f64> {
    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = logits.mapv(|v| (v - max).exp());
    let z = e.sum();
    e / z
}

/// Mean over heads of the softmax cross-entropy of each head's logits.
pub fn classifier_loss(head_logits: &[Array1<f64>], labels: &[usize]) -> Result<f64> {
    if head_logits.len() != labels.len() || labels.is_empty() {
        return Err(MorpheusError::InvalidArgument(format!(
            "{} heads but {} labels",
            head_logits.len(),
            labels.len()
        )));
    }
    let mut total = 0.0;
    for (l, &k) in head_logits.iter().zip(labels) {
        if k >= l.len() {
            return Err(MorpheusError::InvalidArgument(format!(
                "label {k} out of range for N={}",
                l.len()
            )));
        }
        let max = l.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = max + l.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - l[k];
    }
    Ok(total / labels.len() as f64)
}

/// Argmax (lowest index among ties) and its probability, per head.
pub fn predict_codes(head_logits: &[Array1<f64>]) -> Vec<CodePrediction> {
    head_logits
        .iter()
        .map(|l| {
            let probs = softmax(l);
            let mut best = 0;
            for (k, &v) in l.iter().enumerate() {
                if v > l[best] {
                    best = k;
                }
            }
            CodePrediction {
                index: best,
                probability: probs[best],
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Accuracy {
    pub per_slot: Vec<f64>,
    /// Mean of `per_slot`.
    pub overall: f64,
    pub samples: usize,
}

/// Fraction of items whose predicted index equals the label, per slot.
pub fn prediction_accuracy(predicted: &[Vec<usize>], labels: &[Vec<usize>]) -> Result<Accuracy> {
    if predicted.is_empty() {
        return Err(MorpheusError::InvalidArgument("empty evaluation set".into()));
    }
    if predicted.len() != labels.len() {
        return Err(MorpheusError::DimensionMismatch {
            expected: labels.len(),
            got: predicted.len(),
        });
    }
    let m = labels[0].len();
    let mut hits = vec![0usize; m];
    for (p, l) in predicted.iter().zip(labels) {
        if p.len() != m || l.len() != m {
            return Err(MorpheusError::DimensionMismatch {
                expected: m,
                got: p.len().min(l.len()),
            });
        }
        for s in 0..m {
            hits[s] += usize::from(p[s] == l[s]);
        }
    }
    let per_slot: Vec<f64> = hits.iter().map(|&h| h as f64 / predicted.len() as f64).collect();
    let overall = per_slot.iter().sum::<f64>() / m.max(1) as f64;
    Ok(Accuracy {
        per_slot,
        overall,
        samples: predicted.len(),
    })
}
