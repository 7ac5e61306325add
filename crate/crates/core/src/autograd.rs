//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Graph`] records every operation of one forward pass. Parameters live
//! in a [`ParamStore`] and enter the graph by reference; calling
//! [`Graph::backward`] on a `1×1` output accumulates gradients per parameter.
//! All arithmetic is `f64`. Parameters are kept at `f32` storage precision
//! (see [`ParamStore::round_to_storage`]) so checkpoints reproduce them exactly.

use std::collections::BTreeMap;

use ndarray::{s, Array2, Axis, Zip};

pub type Matrix = Array2<f64>;

/// Handle to a parameter tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named parameter tensors with per-tensor trainability.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    trainable: Vec<bool>,
    index: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor, rounding it to storage precision. Panics on a
    /// duplicate name.
    pub fn add(&mut self, name: impl Into<String>, mut value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        round_matrix(&mut value);
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(true);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    /// Direct mutable access. Callers that write arbitrary values should
    /// call [`ParamStore::round_to_storage`] afterwards.
    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, mut value: Matrix) {
        assert_eq!(value.dim(), self.values[id.0].dim(), "shape change for `{}`", self.names[id.0]);
        round_matrix(&mut value);
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.trainable[id.0] = trainable;
    }

    /// Sets trainability for every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for (i, name) in self.names.iter().enumerate() {
            if name.starts_with(prefix) {
                self.trainable[i] = trainable;
            }
        }
    }

    pub fn numel(&self, id: ParamId) -> usize {
        self.values[id.0].len()
    }

    pub fn total_numel(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.ids()
            .filter(|&id| self.is_trainable(id))
            .map(|id| self.numel(id))
            .sum()
    }

    /// Element count of all tensors whose name starts with `prefix`.
    pub fn numel_prefix(&self, prefix: &str) -> usize {
        self.ids()
            .filter(|&id| self.name(id).starts_with(prefix))
            .map(|id| self.numel(id))
            .sum()
    }

    pub fn round_to_storage(&mut self) {
        for v in &mut self.values {
            round_matrix(v);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }
}

/// Rounds every entry to the nearest `f32`.
pub fn round_matrix(m: &mut Matrix) {
    m.mapv_inplace(|x| x as f32 as f64);
}

/// Per-parameter gradients, aligned with a [`ParamStore`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn new(params: usize) -> Self {
        Gradients {
            grads: vec![None; params],
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Matrix> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn accumulate(&mut self, id: ParamId, g: &Matrix) {
        if self.grads.len() <= id.0 {
            self.grads.resize(id.0 + 1, None);
        }
        match &mut self.grads[id.0] {
            Some(acc) => *acc += g,
            slot @ None => *slot = Some(g.clone()),
        }
    }

    pub fn merge(&mut self, other: &Gradients) {
        for (i, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(ParamId(i), g);
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.iter_mut().flatten() {
            *g *= factor;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Matrix)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(|g| g.iter().all(|x| x.is_finite()))
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Which score columns a softmax row may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mask {
    None,
    /// Row `i` sees columns `0..=i + offset`.
    Causal { offset: usize },
}

impl Mask {
    fn allows(self, row: usize, col: usize) -> bool {
        match self {
            Mask::None => true,
            Mask::Causal { offset } => col <= row + offset,
        }
    }
}

enum Op {
    Const,
    Param(ParamId),
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Gather { table: Var, ids: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MeanRows(Var),
    Sum(Var),
    SumSquares(Var),
    RowNormalize { x: Var, norms: Vec<f64> },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Matrix },
}

enum Value {
    Owned(Matrix),
    Param(ParamId),
}

struct Node {
    value: Value,
    op: Op,
    needs_grad: bool,
}

/// One forward pass worth of recorded operations.
pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    grad_all_params: bool,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

impl<'p> Graph<'p> {
    /// Frozen (non-trainable) parameters enter as constants.
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            grad_all_params: false,
        }
    }

    /// Differentiates with respect to every parameter, frozen or not.
    pub fn with_all_gradients(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            grad_all_params: true,
        }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn value(&self, v: Var) -> &Matrix {
        match &self.nodes[v.0].value {
            Value::Owned(m) => m,
            Value::Param(id) => self.params.get(*id),
        }
    }

    /// The single entry of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    fn push(&mut self, value: Matrix, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Const, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.grad_all_params || self.params.is_trainable(id);
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: same value, no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(&self.value(b).t());
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::MatMulT(a, b), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Sub(a, b), ng)
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(x) + self.value(row);
        let ng = self.ng(x) || self.ng(row);
        self.push(value, Op::AddRow(x, row), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let ng = self.ng(a) || self.ng(b);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x) * factor;
        let ng = self.ng(x);
        self.push(value, Op::Scale(x, factor), ng)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mapv(|v| 0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh()));
        let ng = self.ng(x);
        self.push(value, Op::Gelu(x), ng)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        let ng = self.ng(x);
        self.push(value, Op::Tanh(x), ng)
    }

    /// Row-wise layer normalization with `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        const EPS: f64 = 1e-5;
        let xv = self.value(x);
        let n = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let is = 1.0 / (var + EPS).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let value = &xhat * self.value(gamma) + self.value(beta);
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    /// Row-wise softmax; masked entries are exactly zero.
    pub fn softmax(&mut self, x: Var, mask: Mask) -> Var {
        let mut value = self.value(x).clone();
        for (i, mut row) in value.rows_mut().into_iter().enumerate() {
            let max = row
                .iter()
                .enumerate()
                .filter(|(j, _)| mask.allows(i, *j))
                .map(|(_, v)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for (j, v) in row.iter_mut().enumerate() {
                if mask.allows(i, j) {
                    *v = (*v - max).exp();
                    sum += *v;
                } else {
                    *v = 0.0;
                }
            }
            row.mapv_inplace(|v| v / sum);
        }
        let ng = self.ng(x);
        self.push(value, Op::Softmax(x), ng)
    }

    /// Selects rows `ids` of `table` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let mut value = Matrix::zeros((ids.len(), t.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            value.row_mut(r).assign(&t.row(id));
        }
        let ng = self.ng(table);
        self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            ng,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatRows(parts.to_vec()), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        let ng = parts.iter().any(|&p| self.ng(p));
        self.push(value, Op::ConcatCols(parts.to_vec()), ng)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![start..end, ..]).to_owned();
        let ng = self.ng(x);
        self.push(value, Op::SliceRows(x, start), ng)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let value = self.value(x).slice(s![.., start..end]).to_owned();
        let ng = self.ng(x);
        self.push(value, Op::SliceCols(x, start), ng)
    }

    /// Column means as a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .mean_axis(Axis(0))
            .expect("mean of an empty matrix")
            .insert_axis(Axis(0));
        let ng = self.ng(x);
        self.push(value, Op::MeanRows(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(x).sum());
        let ng = self.ng(x);
        self.push(value, Op::Sum(x), ng)
    }

    /// Squared Frobenius norm.
    pub fn sum_squares(&mut self, x: Var) -> Var {
        let value = Matrix::from_elem((1, 1), self.value(x).iter().map(|v| v * v).sum());
        let ng = self.ng(x);
        self.push(value, Op::SumSquares(x), ng)
    }

    /// Scales each row to unit L2 norm. Rows must be non-zero.
    pub fn row_normalize(&mut self, x: Var) -> Var {
        let mut value = self.value(x).clone();
        let mut norms = Vec::with_capacity(value.nrows());
        for mut row in value.rows_mut() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            row.mapv_inplace(|v| v / n);
            norms.push(n);
        }
        let ng = self.ng(x);
        self.push(value, Op::RowNormalize { x, norms }, ng)
    }

    /// Mean softmax cross-entropy of each row of `logits` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logit row");
        let mut probs = lv.clone();
        let mut total = 0.0;
        for (mut row, &t) in probs.rows_mut().into_iter().zip(targets) {
            let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[t];
            row.mapv_inplace(|v| (v - lse).exp());
        }
        let value = Matrix::from_elem((1, 1), total / targets.len() as f64);
        let ng = self.ng(logits);
        self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            ng,
        )
    }

    /// Back-propagates from the `1×1` node `output` and returns gradients
    /// of every parameter that required them.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).dim(), (1, 1), "backward needs a scalar output");
        let mut out = Gradients::new(self.params.len());
        if !self.ng(output) {
            return out;
        }
        let mut grads: Vec<Option<Matrix>> = Vec::with_capacity(output.0 + 1);
        grads.resize_with(output.0 + 1, || None);
        grads[output.0] = Some(Matrix::ones((1, 1)));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(a) => *a += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Const => {}
                Op::Param(id) => out.accumulate(*id, &g),
                Op::MatMul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.dot(&self.value(*b).t()));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, self.value(*a).t().dot(&g));
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.dot(self.value(*b)));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g.t().dot(self.value(*a)));
                    }
                }
                Op::Add(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, -g);
                    }
                }
                Op::AddRow(x, row) => {
                    if self.ng(*row) {
                        acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        acc(&mut grads, *x, g);
                    }
                }
                Op::Mul(a, b) => {
                    if self.ng(*a) {
                        acc(&mut grads, *a, &g * self.value(*b));
                    }
                    if self.ng(*b) {
                        acc(&mut grads, *b, &g * self.value(*a));
                    }
                }
                Op::Scale(x, f) => acc(&mut grads, *x, g * *f),
                Op::Gelu(x) => {
                    let mut dx = self.value(*x).mapv(|v| {
                        let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                        0.5 * (1.0 + t)
                            + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v)
                    });
                    dx *= &g;
                    acc(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let y = self.value(Var(idx));
                    let mut dx = y.mapv(|t| 1.0 - t * t);
                    dx *= &g;
                    acc(&mut grads, *x, dx);
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    if self.ng(*gamma) {
                        acc(
                            &mut grads,
                            *gamma,
                            (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)),
                        );
                    }
                    if self.ng(*beta) {
                        acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    }
                    if self.ng(*x) {
                        let dxhat = &g * self.value(*gamma);
                        let n = dxhat.ncols() as f64;
                        let mut dx = Matrix::zeros(dxhat.dim());
                        for (r, &s) in inv_std.iter().enumerate() {
                            let dh = dxhat.row(r);
                            let xh = xhat.row(r);
                            let m1 = dh.sum() / n;
                            let m2 = dh.dot(&xh) / n;
                            Zip::from(dx.row_mut(r)).and(&dh).and(&xh).for_each(|o, &a, &b| {
                                *o = s * (a - m1 - b * m2);
                            });
                        }
                        acc(&mut grads, *x, dx);
                    }
                }
                Op::Softmax(x) => {
                    let y = self.value(Var(idx));
                    let mut dx = &g * y;
                    for (mut row, yr) in dx.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        Zip::from(&mut row).and(&yr).for_each(|d, &yv| *d -= yv * dot);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Gather { table, ids } => {
                    let mut dt = Matrix::zeros(self.value(*table).dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = dt.row_mut(id);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *table, dt);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).nrows();
                        if self.ng(p) {
                            acc(&mut grads, p, g.slice(s![start..start + n, ..]).to_owned());
                        }
                        start += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let n = self.value(p).ncols();
                        if self.ng(p) {
                            acc(&mut grads, p, g.slice(s![.., start..start + n]).to_owned());
                        }
                        start += n;
                    }
                }
                Op::SliceRows(x, start) => {
                    let mut dx = Matrix::zeros(self.value(*x).dim());
                    dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *x, dx);
                }
                Op::SliceCols(x, start) => {
                    let mut dx = Matrix::zeros(self.value(*x).dim());
                    dx.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *x, dx);
                }
                Op::MeanRows(x) => {
                    let (rows, cols) = self.value(*x).dim();
                    let row = g.row(0).mapv(|v| v / rows as f64);
                    let dx = row.broadcast((rows, cols)).expect("broadcast").to_owned();
                    acc(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let dx = Matrix::from_elem(self.value(*x).dim(), g[[0, 0]]);
                    acc(&mut grads, *x, dx);
                }
                Op::SumSquares(x) => {
                    let dx = self.value(*x) * (2.0 * g[[0, 0]]);
                    acc(&mut grads, *x, dx);
                }
                Op::RowNormalize { x, norms } => {
                    let y = self.value(Var(idx));
                    let mut dx = g.clone();
                    for (r, mut row) in dx.rows_mut().into_iter().enumerate() {
                        let yr = y.row(r);
                        let dot = row.dot(&yr);
                        Zip::from(&mut row)
                            .and(&yr)
                            .for_each(|d, &yv| *d = (*d - yv * dot) / norms[r]);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let mut dl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        dl[[r, t]] -= 1.0;
                    }
                    dl *= g[[0, 0]] / targets.len() as f64;
                    acc(&mut grads, *logits, dl);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central-difference check of every op's backward pass through a
    /// scalar reduction built from all of them.
    #[test]
    fn ops_match_finite_differences() {
        let mut store = ParamStore::new();
        let a = store.add("a", array![[0.3, -0.2, 0.5], [0.1, 0.4, -0.6]]);
        let b = store.add("b", array![[0.2, -0.1], [0.7, 0.3], [-0.4, 0.25]]);
        let gamma = store.add("gamma", array![[1.1, 0.9]]);
        let beta = store.add("beta", array![[0.05, -0.02]]);
        let table = store.add("table", array![[0.5, -0.5], [0.25, 0.75], [-0.3, 0.1]]);

        let f = |g: &mut Graph| {
            let av = g.param(a);
            let bv = g.param(b);
            let ab = g.matmul(av, bv); // 2x2
            let act = g.gelu(ab);
            let gm = g.param(gamma);
            let bt = g.param(beta);
            let ln = g.layer_norm(act, gm, bt);
            let tv = g.param(table);
            let emb = g.gather(tv, &[2, 0]);
            let mixed = g.add(ln, emb);
            let scores = g.matmul_t(mixed, emb);
            let sm = g.softmax(scores, Mask::Causal { offset: 0 });
            let th = g.tanh(sm);
            let cat = g.concat_cols(&[th, mixed]);
            let sl = g.slice_cols(cat, 1, 3);
            let nr = g.row_normalize(sl);
            let rows = g.concat_rows(&[nr, emb]);
            let top = g.slice_rows(rows, 1, 3);
            let ce = g.cross_entropy(top, &[1, 0]);
            let mean = g.mean_rows(mixed);
            let sq = g.sum_squares(mean);
            let prod = g.mul(mixed, emb);
            let s = g.sum(prod);
            let t1 = g.add(ce, sq);
            let t2 = g.scale(s, 0.3);
            let diff = g.sub(t1, t2);
            let row = g.param(beta);
            let shifted = g.add_row(mixed, row);
            let s2 = g.sum_squares(shifted);
            g.add(diff, s2)
        };

        let graph_grads = {
            let mut g = Graph::new(&store);
            let out = f(&mut g);
            g.backward(out)
        };

        let eps = 1e-6;
        for id in store.ids() {
            let analytic = graph_grads.get(id).expect("every parameter is used").clone();
            for ((r, c), &an) in analytic.indexed_iter() {
                let mut plus = store.clone();
                plus.get_mut(id)[[r, c]] += eps;
                let mut minus = store.clone();
                minus.get_mut(id)[[r, c]] -= eps;
                let lp = {
                    let mut g = Graph::new(&plus);
                    let o = f(&mut g);
                    g.scalar(o)
                };
                let lm = {
                    let mut g = Graph::new(&minus);
                    let o = f(&mut g);
                    g.scalar(o)
                };
                let numeric = (lp - lm) / (2.0 * eps);
                assert!(
                    (numeric - an).abs() <= 1e-6 * (1.0 + numeric.abs()),
                    "{}[{r},{c}]: analytic {an} numeric {numeric}",
                    store.name(id)
                );
            }
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[1.0, 2.0]]);
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let d = g.detach(xv);
        let p = g.mul(xv, d);
        let s = g.sum(p);
        let grads = g.backward(s);
        // d/dx (x * sg[x]) = sg[x]
        assert_eq!(grads.get(x).unwrap(), &array![[1.0, 2.0]]);
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut store = ParamStore::new();
        let x = store.add("x", array![[1.0]]);
        let y = store.add("y", array![[3.0]]);
        store.set_trainable(y, false);
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let yv = g.param(y);
        let p = g.mul(xv, yv);
        let grads = g.backward(p);
        assert_eq!(grads.get(x).unwrap()[[0, 0]], 3.0);
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn masked_softmax_rows() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let x = g.constant(array![[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]]);
        let y = g.softmax(x, Mask::Causal { offset: 0 });
        let v = g.value(y);
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v.row(1).sum() - 1.0).abs() < 1e-15);
        assert_eq!(v[[1, 2]], 0.0);
    }

    #[test]
    fn storage_rounding_is_idempotent() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[0.1, 1.0 / 3.0]]);
        let once = store.get(id).clone();
        store.round_to_storage();
        assert_eq!(store.get(id), &once);
        assert_eq!(once[[0, 0]], 0.1f32 as f64);
    }
}
