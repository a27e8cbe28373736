//! Central finite-difference comparison against the tape's gradients.

use super::graph::{Graph, Var};
use super::param::ParamStore;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: (String, usize),
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_error < tolerance
    }
}

/// Checks `d loss / d param` for every trainable parameter.
///
/// `loss` records a forward pass into the given graph and returns the scalar
/// loss node. At most `per_param` evenly spaced entries of each parameter are
/// perturbed (all of them when `None`).
pub fn check_params<F>(
    store: &mut ParamStore,
    step: f64,
    per_param: Option<usize>,
    loss: F,
) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<Var>,
{
    store.zero_grads();
    let mut g = Graph::new();
    let root = loss(store, &mut g)?;
    g.backward(root, 1.0, store)?;

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = loss(store, &mut g)?;
        Ok(g.value(root).data()[0])
    };

    let mut report = GradCheckReport {
        max_error: 0.0,
        worst: (String::new(), 0),
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let n = store.get(id).value.len();
        let indices: Vec<usize> = match per_param {
            Some(limit) if limit < n => (0..limit).map(|i| i * n / limit).collect(),
            _ => (0..n).collect(),
        };
        for idx in indices {
            let orig = store.get(id).value.data()[idx];
            store.get_mut(id).value.data_mut()[idx] = orig + step;
            let plus = eval(store)?;
            store.get_mut(id).value.data_mut()[idx] = orig - step;
            let minus = eval(store)?;
            store.get_mut(id).value.data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let analytic = store.get(id).grad.data()[idx];
            let err = super::grad_check_error(analytic, numeric);
            report.checked += 1;
            if err > report.max_error || !err.is_finite() {
                report.max_error = if err.is_finite() { err } else { f64::INFINITY };
                report.worst = (store.get(id).name.clone(), idx);
            }
        }
    }
    Ok(report)
}
