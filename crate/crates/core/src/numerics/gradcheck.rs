//! Central finite-difference gradient checks.

use crate::error::{domain_err, Result};
use crate::scalar::Scalar;

use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

/// Below this magnitude on both sides the absolute difference is used.
pub const ABS_FALLBACK: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter name, flat coordinate)` of the worst mismatch.
    pub worst: Option<(String, usize)>,
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < ABS_FALLBACK {
        (analytic - numeric).abs()
    } else {
        (analytic - numeric).abs() / scale
    }
}

fn scalar_of<T: Scalar>(g: &Graph<T>, root: Var) -> T {
    g.value(root).data()[0]
}

/// Checks the analytic gradient of `f` with respect to `params` against
/// central differences with step `eps`. `f` receives one leaf per tensor, in
/// order, and must return a scalar node.
pub fn finite_difference_check<T, F>(
    f: F,
    params: &[Tensor<T>],
    eps: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let mut store = ParamStore::new();
    let mut ids = Vec::with_capacity(params.len());
    for (i, p) in params.iter().enumerate() {
        ids.push(store.add(format!("arg{i}"), p.clone(), false)?);
    }
    check_param_gradients(&mut store, eps, |g| {
        let vars: Vec<Var> = ids.iter().map(|&id| g.param(id)).collect();
        f(g, &vars)
    })
}

/// Same check over every tensor of a parameter store.
pub fn check_param_gradients<T, F>(
    store: &mut ParamStore<T>,
    eps: f64,
    f: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>) -> Result<Var>,
{
    check_selected_params(store, eps, None, f)
}

/// Restricts the check to at most `max_coords` evenly spaced coordinates per
/// tensor when given.
pub fn check_selected_params<T, F>(
    store: &mut ParamStore<T>,
    eps: f64,
    max_coords: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return domain_err(format!(
            "finite difference step must be positive, got {eps}"
        ));
    }
    let analytic: Vec<Vec<T>> = {
        let mut g = Graph::with_params(store);
        let root = f(&mut g)?;
        let grads = g.backward(root)?;
        let mut out: Vec<Vec<T>> = store
            .iter()
            .map(|(_, p)| vec![T::zero(); p.tensor.len()])
            .collect();
        for (id, gr) in grads.params() {
            out[id.0].copy_from_slice(gr);
        }
        out
    };
    let eval = |store: &ParamStore<T>| -> Result<T> {
        let mut g = Graph::with_params(store);
        let root = f(&mut g)?;
        Ok(scalar_of(&g, root))
    };
    let h = T::lit(eps);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_values: (0.0, 0.0),
        coordinates: 0,
    };
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let len = store.tensor(id).len();
        let stride = match max_coords {
            Some(m) if m > 0 && len > m => len.div_ceil(m),
            _ => 1,
        };
        for c in (0..len).step_by(stride) {
            let orig = store.tensor(id).data()[c];
            store.tensor_mut(id).data_mut()[c] = orig + h;
            let plus = eval(store);
            store.tensor_mut(id).data_mut()[c] = orig - h;
            let minus = eval(store);
            store.tensor_mut(id).data_mut()[c] = orig;
            let (plus, minus) = (plus?, minus?);
            if !plus.is_finite() || !minus.is_finite() {
                return domain_err(format!(
                    "non-finite objective when perturbing {}[{c}]",
                    store.get(id).name
                ));
            }
            let numeric = (plus - minus).as_f64() / (2.0 * eps);
            let err = relative_error(analytic[id.0][c].as_f64(), numeric);
            report.coordinates += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((store.get(id).name.clone(), c));
                report.worst_values = (analytic[id.0][c].as_f64(), numeric);
            }
        }
    }
    Ok(report)
}
