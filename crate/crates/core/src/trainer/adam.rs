//! Adaptive-moment optimizer with linear learning-rate warmup.

use crate::autograd::{round_matrix, Gradients, Matrix, ParamId, ParamStore};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Per-parameter first and second moments. Moments are kept at storage
/// precision so a resumed run continues bit-exactly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Adam {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    /// Number of updates applied so far.
    pub steps: u64,
    moments: Vec<Option<(Matrix, Matrix)>>,
}

impl Adam {
    pub fn new(learning_rate: f64, warmup_steps: u64) -> Self {
        Adam {
            learning_rate,
            warmup_steps,
            steps: 0,
            moments: Vec::new(),
        }
    }

    /// Learning rate for update number `step` (1-based).
    pub fn rate_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 || step >= self.warmup_steps {
            self.learning_rate
        } else {
            self.learning_rate * step as f64 / self.warmup_steps as f64
        }
    }

    /// Applies one update to every trainable parameter with a gradient.
    /// Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> f64 {
        self.steps += 1;
        let t = self.steps as i32;
        let lr = self.rate_at(self.steps);
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (id, g) in grads.iter() {
            if !store.is_trainable(id) {
                continue;
            }
            if self.moments.len() <= id.0 {
                self.moments.resize(id.0 + 1, None);
            }
            let (m, v) = self.moments[id.0]
                .get_or_insert_with(|| (Matrix::zeros(g.raw_dim()), Matrix::zeros(g.raw_dim())));
            ndarray::Zip::from(&mut *m).and(&mut *v).and(g).for_each(|m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            });
            round_matrix(m);
            round_matrix(v);
            let p = store.get_mut(id);
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|p, &m, &v| {
                *p -= lr * (m / c1) / ((v / c2).sqrt() + EPSILON);
            });
            round_matrix(store.get_mut(id));
        }
        lr
    }

    pub fn moments(&self, id: ParamId) -> Option<&(Matrix, Matrix)> {
        self.moments.get(id.0).and_then(Option::as_ref)
    }

    pub fn set_moments(&mut self, id: ParamId, m: Matrix, v: Matrix) {
        if self.moments.len() <= id.0 {
            self.moments.resize(id.0 + 1, None);
        }
        self.moments[id.0] = Some((m, v));
    }
}
