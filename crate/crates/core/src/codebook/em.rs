//! Isotropic Gaussian mixture fitted by expectation–maximization with a
//! uniform, fixed prior over components.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{InitStrategy, PersonaCodebook};
use crate::autograd::Matrix;
use crate::error::{MorpheusError, Result};

pub const VARIANCE_FLOOR: f64 = 1e-6;
/// Components whose responsibility mass falls below this fraction of `|D|`
/// are reseeded.
pub const DEAD_MASS_FRACTION: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct EmState {
    pub means: Matrix,
    pub variances: Vec<f64>,
    pub responsibilities: Matrix,
    /// Log-likelihood of the data before the first and after every iteration.
    pub log_likelihood: Vec<f64>,
    pub iterations: usize,
    pub reseeded: usize,
}

fn check_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(MorpheusError::NonFinite(what.into()))
    }
}

/// Posterior component probabilities for every point, plus the data
/// log-likelihood. Computed in the log domain.
pub fn e_step(points: &Matrix, means: &Matrix, variances: &[f64]) -> Result<(Matrix, f64)> {
    let (n_points, d) = points.dim();
    let n = means.nrows();
    if means.ncols() != d {
        return Err(MorpheusError::DimensionMismatch {
            expected: d,
            got: means.ncols(),
        });
    }
    if variances.len() != n {
        return Err(MorpheusError::DimensionMismatch {
            expected: n,
            got: variances.len(),
        });
    }
    check_finite(points, "EM points")?;
    check_finite(means, "EM means")?;
    if variances.iter().any(|v| !v.is_finite() || *v < VARIANCE_FLOOR) {
        return Err(MorpheusError::InvalidArgument(
            "EM variances must be finite and at least the variance floor".into(),
        ));
    }

    let log_prior = -(n as f64).ln();
    let log_norm: Vec<f64> = variances
        .iter()
        .map(|&v| -0.5 * d as f64 * (2.0 * std::f64::consts::PI * v).ln())
        .collect();
    let mut resp = Matrix::zeros((n_points, n));
    let mut log_joint = vec![0.0; n];
    let mut total = 0.0;
    for i in 0..n_points {
        let x = points.row(i);
        for k in 0..n {
            let dist2: f64 = x
                .iter()
                .zip(means.row(k).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            log_joint[k] = log_prior + log_norm[k] - dist2 / (2.0 * variances[k]);
        }
        let max = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..n {
            let w = (log_joint[k] - max).exp();
            resp[[i, k]] = w;
            z += w;
        }
        total += max + z.ln();
        resp.row_mut(i).mapv_inplace(|w| w / z);
    }
    Ok((resp, total))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub means: Matrix,
    pub variances: Vec<f64>,
    /// Components with (near) zero responsibility mass.
    pub dead: Vec<usize>,
}

/// Weighted means and isotropic variances
/// `σ_k² = Σ r_ik ‖p_i − μ_k‖² / (d Σ r_ik)`, floored. Components without
/// mass are reported in [`MStep::dead`] and keep `fallback` parameters when
/// given (zero mean, unit variance otherwise).
pub fn m_step(
    points: &Matrix,
    responsibilities: &Matrix,
    fallback: Option<(&Matrix, &[f64])>,
) -> Result<MStep> {
    let (n_points, d) = points.dim();
    if responsibilities.nrows() != n_points {
        return Err(MorpheusError::DimensionMismatch {
            expected: n_points,
            got: responsibilities.nrows(),
        });
    }
    let n = responsibilities.ncols();
    let mut means = Matrix::zeros((n, d));
    let mut variances = vec![1.0; n];
    let mut dead = Vec::new();
    let dead_mass = DEAD_MASS_FRACTION * n_points as f64;
    for k in 0..n {
        let col = responsibilities.column(k);
        let mass: f64 = col.sum();
        if mass < dead_mass || mass <= 0.0 {
            dead.push(k);
            if let Some((m, v)) = fallback {
                means.row_mut(k).assign(&m.row(k));
                variances[k] = v[k];
            }
            if mass <= 0.0 {
                continue;
            }
        }
        let mut mu = ndarray::Array1::<f64>::zeros(d);
        for (i, &r) in col.iter().enumerate() {
            if r != 0.0 {
                mu.scaled_add(r, &points.row(i));
            }
        }
        mu /= mass;
        let mut spread = 0.0;
        for (i, &r) in col.iter().enumerate() {
            if r != 0.0 {
                let dist2: f64 = points
                    .row(i)
                    .iter()
                    .zip(mu.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                spread += r * dist2;
            }
        }
        if mass >= dead_mass {
            means.row_mut(k).assign(&mu);
            variances[k] = (spread / (d as f64 * mass)).max(VARIANCE_FLOOR);
        }
    }
    Ok(MStep {
        means,
        variances,
        dead,
    })
}

/// Mean squared per-coordinate deviation from the global mean.
fn global_variance(points: &Matrix) -> f64 {
    let (n, d) = points.dim();
    let mean = points.mean_axis(ndarray::Axis(0)).expect("non-empty points");
    let mut total = 0.0;
    for row in points.rows() {
        total += row.iter().zip(mean.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    (total / (n * d) as f64).max(VARIANCE_FLOOR)
}

/// Indices of `n` random points, preferring distinct values.
fn seed_indices(points: &Matrix, n: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.nrows()).collect();
    order.shuffle(rng);
    let mut chosen: Vec<usize> = Vec::with_capacity(n);
    let mut duplicates = Vec::new();
    for &i in &order {
        if chosen.len() == n {
            break;
        }
        if chosen.iter().any(|&j| points.row(j) == points.row(i)) {
            duplicates.push(i);
        } else {
            chosen.push(i);
        }
    }
    chosen.extend(duplicates.into_iter().take(n - chosen.len()));
    chosen
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iters: usize,
    /// Stop once one iteration improves the log-likelihood by less than this.
    pub tol: f64,
    pub seed: u64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            max_iters: 200,
            tol: 1e-6,
            seed: 0,
        }
    }
}

/// Fits `n` components to `points` and returns a codebook whose codes are
/// the fitted means, with the final [`EmState`] attached.
pub fn em_fit(points: &Matrix, n: usize, opts: EmOptions) -> Result<PersonaCodebook> {
    let (n_points, d) = points.dim();
    if n == 0 || d == 0 {
        return Err(MorpheusError::InvalidArgument("EM needs N ≥ 1 and d ≥ 1".into()));
    }
    if n_points < n {
        return Err(MorpheusError::InvalidArgument(format!(
            "EM needs at least N = {n} points, got {n_points}"
        )));
    }
    check_finite(points, "EM points")?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let init_var = global_variance(points);

    let mut means = Matrix::zeros((n, d));
    for (k, i) in seed_indices(points, n, &mut rng).into_iter().enumerate() {
        means.row_mut(k).assign(&points.row(i));
    }
    let mut variances = vec![init_var; n];
    let (mut resp, mut ll) = e_step(points, &means, &variances)?;
    let mut trace = vec![ll];
    let mut reseeded = 0;
    let max_iters = if n == 1 { 1 } else { opts.max_iters };
    let mut iterations = 0;

    while iterations < max_iters {
        let step = m_step(points, &resp, Some((&means, &variances)))?;
        let mut next_means = step.means;
        let mut next_vars = step.variances;
        let (mut next_resp, mut next_ll) = e_step(points, &next_means, &next_vars)?;

        if !step.dead.is_empty() {
            let mut cand_means = next_means.clone();
            let mut cand_vars = next_vars.clone();
            for &k in &step.dead {
                let i = rng.gen_range(0..n_points);
                cand_means.row_mut(k).assign(&points.row(i));
                cand_vars[k] = init_var;
            }
            let (cand_resp, cand_ll) = e_step(points, &cand_means, &cand_vars)?;
            // Reseeding may not lower the likelihood.
            if cand_ll >= next_ll {
                reseeded += step.dead.len();
                next_means = cand_means;
                next_vars = cand_vars;
                next_resp = cand_resp;
                next_ll = cand_ll;
            }
        }

        iterations += 1;
        let improvement = next_ll - ll;
        means = next_means;
        variances = next_vars;
        resp = next_resp;
        ll = next_ll;
        trace.push(ll);
        if improvement.is_nan() || improvement < opts.tol {
            break;
        }
    }

    let state = EmState {
        means: means.clone(),
        variances,
        responsibilities: resp,
        log_likelihood: trace,
        iterations,
        reseeded,
    };
    let mut codebook = PersonaCodebook::from_vectors(means, InitStrategy::Em, opts.seed)?;
    codebook.em_state = Some(state);
    Ok(codebook)
}
