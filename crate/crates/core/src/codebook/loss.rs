//! Vector-quantization and contrastive alignment losses, both as plain
//! functions with explicit gradients and as graph nodes.

use ndarray::{Array1, ArrayView1, ArrayView2};

use crate::autograd::{Graph, Var};
use crate::error::{MorpheusError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct VqLoss {
    pub loss: f64,
    /// Gradient reaching the code; only the codebook term contributes.
    pub grad_code: Array1<f64>,
    /// Gradient reaching the persona vector; only the commitment term contributes.
    pub grad_persona: Array1<f64>,
}

fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(MorpheusError::DimensionMismatch { expected: a, got: b });
    }
    Ok(())
}

/// `‖sg[p] − e‖² + β‖sg[e] − p‖²`.
pub fn vq_loss(p: ArrayView1<f64>, e: ArrayView1<f64>, beta: f64) -> Result<VqLoss> {
    check_dims(e.len(), p.len())?;
    if beta.is_nan() || beta <= 0.0 {
        return Err(MorpheusError::InvalidArgument(format!("beta must be positive, got {beta}")));
    }
    let diff = &p - &e;
    let sq = diff.dot(&diff);
    Ok(VqLoss {
        loss: sq + beta * sq,
        grad_code: diff.mapv(|v| -2.0 * v),
        grad_persona: diff.mapv(|v| 2.0 * beta * v),
    })
}

/// Graph form of [`vq_loss`]; `p` and `e` share a shape.
pub fn vq_graph(g: &mut Graph, p: Var, e: Var, beta: f64) -> Var {
    let p_stop = g.detach(p);
    let e_stop = g.detach(e);
    let d1 = g.sub(p_stop, e);
    let codebook_term = g.sum_squares(d1);
    let d2 = g.sub(e_stop, p);
    let commit = g.sum_squares(d2);
    let commit = g.scale(commit, beta);
    g.add(codebook_term, commit)
}

fn check_nonzero_rows(m: ArrayView2<f64>, what: &str) -> Result<()> {
    for (i, row) in m.rows().into_iter().enumerate() {
        let n2 = row.dot(&row);
        if !n2.is_finite() || n2 <= 0.0 {
            return Err(MorpheusError::InvalidArgument(format!("{what} row {i} has zero or non-finite norm")));
        }
    }
    Ok(())
}

fn check_contrastive(p: ArrayView2<f64>, codes: ArrayView2<f64>, k: usize, tau: f64) -> Result<()> {
    check_dims(codes.ncols(), p.ncols())?;
    if k >= codes.nrows() {
        return Err(MorpheusError::InvalidArgument(format!(
            "target code {k} out of range for N={}",
            codes.nrows()
        )));
    }
    if tau.is_nan() || tau <= 0.0 {
        return Err(MorpheusError::InvalidArgument(format!("temperature must be positive, got {tau}")));
    }
    check_nonzero_rows(p, "persona vector")?;
    check_nonzero_rows(codes, "codebook")
}

/// Cross-entropy of cosine-similarity logits `sim(p, e_j)/τ` against code `k`.
pub fn contrastive_loss(p: ArrayView1<f64>, codes: ArrayView2<f64>, k: usize, tau: f64) -> Result<f64> {
    let p2 = p.insert_axis(ndarray::Axis(0));
    check_contrastive(p2, codes, k, tau)?;
    let store = crate::autograd::ParamStore::new();
    let mut g = Graph::new(&store);
    let pv = g.constant(p2.to_owned());
    let cv = g.constant(codes.to_owned());
    let out = contrastive_graph_unchecked(&mut g, pv, cv, k, tau);
    Ok(g.scalar(out))
}

/// Graph form of [`contrastive_loss`]; `p` is `1×d`, `codes` is `N×d`.
pub fn contrastive_graph(g: &mut Graph, p: Var, codes: Var, k: usize, tau: f64) -> Result<Var> {
    check_contrastive(g.value(p).view(), g.value(codes).view(), k, tau)?;
    if g.value(p).nrows() != 1 {
        return Err(MorpheusError::DimensionMismatch {
            expected: 1,
            got: g.value(p).nrows(),
        });
    }
    Ok(contrastive_graph_unchecked(g, p, codes, k, tau))
}

fn contrastive_graph_unchecked(g: &mut Graph, p: Var, codes: Var, k: usize, tau: f64) -> Var {
    let pn = g.row_normalize(p);
    let en = g.row_normalize(codes);
    let sims = g.matmul_t(pn, en);
    let logits = g.scale(sims, 1.0 / tau);
    g.cross_entropy(logits, &[k])
}
