//! Central-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::params::{ParamGrads, ParamStore};
use crate::{Error, Result};

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;
/// Default pass threshold on the relative error.
pub const DEFAULT_TOL: f64 = 1e-4;
/// Denominator floor so entries with vanishing gradients are compared
/// absolutely instead of dividing noise by noise.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_ERROR_FLOOR)
}

fn scalar_output(g: &Graph, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::Shape {
            op: "grad_check output",
            expected: vec![1, 1],
            got: v.shape().to_vec(),
        });
    }
    Ok(v.scalar())
}

/// Loss value and reverse-mode parameter gradients of `f`.
pub fn analytic_gradients<F>(store: &ParamStore, f: &F) -> Result<(f64, ParamGrads)>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    let value = scalar_output(&g, out)?;
    let grads = g.backward(out);
    Ok((value, g.param_grads(&grads)))
}

/// Central differences of `f` for every scalar parameter.
pub fn numeric_gradients<F>(store: &ParamStore, f: &F, h: f64) -> Result<ParamGrads>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut work = store.clone();
    let mut out = ParamGrads::zeros_like(store);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.value(id).len() {
            let x = store.value(id).data()[i];
            let (xp, xm) = (x + h, x - h);
            work.value_mut(id).data_mut()[i] = xp;
            let fp = eval(&work, f)?;
            work.value_mut(id).data_mut()[i] = xm;
            let fm = eval(&work, f)?;
            work.value_mut(id).data_mut()[i] = x;
            out.get_mut(id).data_mut()[i] = (fp - fm) / (xp - xm);
        }
    }
    Ok(out)
}

fn eval<F>(store: &ParamStore, f: &F) -> Result<f64>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let mut g = Graph::new(store);
    let out = f(&mut g)?;
    scalar_output(&g, out)
}

/// Entry-wise comparison of two gradient sets.
pub fn compare(store: &ParamStore, analytic: &ParamGrads, numeric: &ParamGrads, tol: f64) -> GradCheckReport {
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tol,
    };
    for id in store.ids() {
        for (i, (a, n)) in analytic.get(id).data().iter().zip(numeric.get(id).data()).enumerate() {
            let e = relative_error(*a, *n);
            report.checked += 1;
            if e > report.max_rel_error || !e.is_finite() {
                report.max_rel_error = if e.is_finite() { e } else { f64::INFINITY };
                report.worst_param = store.name(id).to_string();
                report.worst_index = i;
                report.analytic = *a;
                report.numeric = *n;
            }
        }
    }
    report
}

/// Checks reverse-mode gradients of the scalar built by `f` against central
/// differences with step `h`. `f` must be deterministic (dropout off).
pub fn grad_check<F>(store: &ParamStore, f: F, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph) -> Result<Var>,
{
    let (_, analytic) = analytic_gradients(store, &f)?;
    let numeric = numeric_gradients(store, &f, h)?;
    Ok(compare(store, &analytic, &numeric, tol))
}
