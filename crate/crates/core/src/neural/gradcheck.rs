use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::error::{MorpheusError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// `(parameter name, flat index, analytic, numeric)` of the worst probe.
    pub worst: Option<(String, usize, f64, f64)>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error <= self.tolerance
    }
}

/// Entries with both derivatives below this magnitude are compared absolutely.
const SCALE_FLOOR: f64 = 1e-3;

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(SCALE_FLOOR)
}

/// Compares analytic gradients of the scalar built by `loss_fn` against
/// central finite differences on `probes` randomly drawn coordinates of
/// `params` (all coordinates when `probes` is `None`).
pub fn gradcheck<F>(
    loss_fn: F,
    store: &ParamStore,
    params: &[ParamId],
    epsilon: f64,
    tolerance: f64,
    probes: Option<usize>,
    rng: &mut impl Rng,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::with_all_gradients(s);
        let out = loss_fn(&mut g)?;
        let v = g.scalar(out);
        if !v.is_finite() {
            return Err(MorpheusError::NonFinite("gradcheck loss".into()));
        }
        Ok(v)
    };

    let analytic = {
        let mut g = Graph::with_all_gradients(store);
        let out = loss_fn(&mut g)?;
        if !g.scalar(out).is_finite() {
            return Err(MorpheusError::NonFinite("gradcheck loss".into()));
        }
        g.backward(out)
    };

    let mut coords: Vec<(ParamId, usize)> = params
        .iter()
        .flat_map(|&id| (0..store.numel(id)).map(move |i| (id, i)))
        .collect();
    if let Some(n) = probes {
        let mut picked = Vec::with_capacity(n.min(coords.len()));
        for _ in 0..n.min(coords.len()) {
            let j = rng.gen_range(0..coords.len());
            picked.push(coords.swap_remove(j));
        }
        coords = picked;
    }

    // Perturbations are applied without storage rounding.
    let mut scratch = store.clone();
    let mut report = GradcheckReport {
        checked: 0,
        max_relative_error: 0.0,
        worst: None,
        tolerance,
    };
    for (id, flat) in coords {
        let cols = store.get(id).ncols();
        let (r, c) = (flat / cols, flat % cols);
        let original = store.get(id)[[r, c]];
        scratch.get_mut(id)[[r, c]] = original + epsilon;
        let plus = eval(&scratch)?;
        scratch.get_mut(id)[[r, c]] = original - epsilon;
        let minus = eval(&scratch)?;
        scratch.get_mut(id)[[r, c]] = original;

        let numeric = (plus - minus) / (2.0 * epsilon);
        let an = analytic.get(id).map_or(0.0, |g| g[[r, c]]);
        let err = relative_error(an, numeric);
        report.checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((store.name(id).to_string(), flat, an, numeric));
        }
    }
    Ok(report)
}
