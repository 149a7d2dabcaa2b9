//! Central finite-difference gradient checks.

use crate::autograd::{Graph, Var};
use crate::error::{CssError, Result};
use crate::params::ParamStore;

/// Denominator floor of the relative error.
pub const GRADIENT_FLOOR: f64 = 1e-8;

/// Gradient agreement between analytic and central-difference gradients.
///
/// `max_rel_error` is taken over parameter tensors with Euclidean norms:
/// `|a - cd| / max(|a|, |cd|, GRADIENT_FLOOR)`. The worst single entry is
/// reported alongside for diagnosis.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    /// Norm of the analytic gradient of `worst_param`.
    pub worst_param_norm: f64,
    pub entry_rel_error: f64,
    pub worst_entry_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

fn rel_error(a: f64, cd: f64, diff: f64) -> f64 {
    diff / a.max(cd).max(GRADIENT_FLOOR)
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// Compares the gradients of `build` (which records a scalar loss into a
/// fresh graph) against central differences with the given `step`.
pub fn check_gradients<F>(store: &ParamStore, step: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(CssError::contract("finite-difference step must be positive"));
    }
    let mut g = Graph::new();
    let root = build(&mut g, store)?;
    let grads = g.backward(root)?;

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new();
        let root = build(&mut g, s)?;
        Ok(g.value(root).item())
    };

    let mut work = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_param_norm: 0.0,
        entry_rel_error: 0.0,
        worst_entry_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (id, param) in store.iter() {
        let n = param.value.numel();
        let analytic = grads.get(id).map_or_else(|| vec![0.0; n], |t| t.data().to_vec());
        let mut numeric = vec![0.0; n];
        for i in 0..n {
            let orig = param.value.data()[i];
            work.value_mut(id).data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[i] = orig;
            numeric[i] = (up - down) / (2.0 * step);

            let (a, cd) = (analytic[i], numeric[i]);
            let rel = rel_error(a.abs(), cd.abs(), (a - cd).abs());
            report.checked += 1;
            if rel > report.entry_rel_error {
                report.entry_rel_error = rel;
                report.worst_entry_param = param.name.clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = cd;
            }
        }
        let a_norm = norm(analytic.iter().copied());
        let rel = rel_error(
            a_norm,
            norm(numeric.iter().copied()),
            norm(analytic.iter().zip(&numeric).map(|(a, b)| a - b)),
        );
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_param = param.name.clone();
            report.worst_param_norm = a_norm;
        }
    }
    Ok(report)
}
