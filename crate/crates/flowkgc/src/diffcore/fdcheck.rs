//! Central finite-difference gradient checking.
//!
//! Only the forward closure is used; nothing here touches the tape's
//! backward path, so tape gradients can be validated against it.

use super::params::{ParamId, ParamStore};

/// Central finite differences of `f` w.r.t. every component of `id`.
pub fn fd_grad<F>(params: &mut ParamStore, id: ParamId, f: &F, h: f64) -> Vec<f64>
where
    F: Fn(&ParamStore) -> f64,
{
    let n = params.get(id).value.len();
    let mut out = vec![0.0; n];
    for j in 0..n {
        let orig = params.get(id).value.data[j];
        params.get_mut(id).value.data[j] = orig + h;
        let plus = f(params);
        params.get_mut(id).value.data[j] = orig - h;
        let minus = f(params);
        params.get_mut(id).value.data[j] = orig;
        out[j] = (plus - minus) / (2.0 * h);
    }
    out
}

/// Relative error with denominator `max(|a|, |b|, 1)`.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// Check every parameter of the store against finite differences.
/// Returns the worst relative error over all components.
pub fn check_all_params<F>(params: &mut ParamStore, f: &F, h: f64) -> f64
where
    F: Fn(&ParamStore) -> f64,
{
    let analytic: Vec<Vec<f64>> = params.iter().map(|(_, p)| p.grad.clone()).collect();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let id = ParamId(i);
        let numeric = fd_grad(params, id, f, h);
        worst = worst.max(max_rel_err(&analytic[i], &numeric));
    }
    worst
}
