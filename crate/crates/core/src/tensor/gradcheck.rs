//! Central finite-difference gradient checks.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let v = g.value(out);
    if v.numel() != 1 {
        return Err(Error::Contract(format!(
            "grad_check: function must return a scalar, got shape {:?}",
            v.shape()
        )));
    }
    Ok(v.values()[0])
}

/// Compares the analytic gradient of a scalar function of several inputs
/// against fourth-order central differences and returns the worst relative
/// error. The five-point stencil resolves gradient entries of order 1e-9
/// that the three-point one loses to truncation or round-off.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Contract("grad_check: eps must be positive".into()));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, grads) in analytic.iter().enumerate() {
        for (k, &a) in grads.iter().enumerate() {
            let orig = probe[which].values()[k];
            let mut at = |h: f64| {
                probe[which].values_mut()[k] = orig + h;
                eval_scalar(&f, &probe)
            };
            let (up, down) = (at(eps)?, at(-eps)?);
            let (up2, down2) = (at(2.0 * eps)?, at(-2.0 * eps)?);
            probe[which].values_mut()[k] = orig;
            let numeric = (8.0 * (up - down) - (up2 - down2)) / (12.0 * eps);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), eps)
}
