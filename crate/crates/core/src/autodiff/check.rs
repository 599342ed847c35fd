//! Finite-difference gradient checking.

use super::graph::{DiffTensor, Graph};
use super::tensor::Tensor;
use crate::error::Result;

/// Evaluates `f` at `x` on a fresh graph and returns the scalar value.
pub fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, DiffTensor<'g>) -> Result<DiffTensor<'g>>,
{
    let g = Graph::new();
    let v = g.constant(x.clone());
    f(&g, v)?.item()
}

/// Gradient of scalar-valued `f` at `x` by reverse-mode differentiation.
pub fn analytic_gradient<F>(f: &F, x: &Tensor) -> Result<Tensor>
where
    F: for<'g> Fn(&'g Graph, DiffTensor<'g>) -> Result<DiffTensor<'g>>,
{
    let g = Graph::new();
    let v = g.var(x.clone());
    let loss = f(&g, v)?;
    g.backward(loss)?;
    Ok(v.grad().unwrap_or_else(|| Tensor::zeros(x.shape())))
}

/// Central-difference gradient with step `h`.
pub fn numeric_gradient<F>(f: &F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: for<'g> Fn(&'g Graph, DiffTensor<'g>) -> Result<DiffTensor<'g>>,
{
    let mut out = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = x.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = eval_scalar(f, &probe)?;
        probe.data_mut()[k] = orig - h;
        let down = eval_scalar(f, &probe)?;
        probe.data_mut()[k] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Max over coordinates of `|analytic - numeric| / max(1, |analytic|)`.
pub fn grad_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph, DiffTensor<'g>) -> Result<DiffTensor<'g>>,
{
    if !(h > 0.0) {
        return Err(crate::error::Error::param(format!(
            "step must be positive, got {h}"
        )));
    }
    let analytic = analytic_gradient(&f, x)?;
    let numeric = numeric_gradient(&f, x, h)?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max))
}
