//! Central finite-difference check of tape gradients, run in `f64`.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Gradients below this magnitude are compared in absolute terms.
pub const MAGNITUDE_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub rel_errors: Vec<f64>,
    pub max_rel_error: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

/// `|a − b| / max(|a|, |b|, MAGNITUDE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares the tape gradient of scalar `f` at `point` with central
/// differences of step `eps` along every coordinate.
pub fn grad_check<F>(f: F, point: &Tensor<f64>, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Graph<f64>, &Var<f64>) -> Result<Var<f64>>,
{
    let g = Graph::new();
    let x = g.param(point.clone());
    let loss = f(&g, &x)?;
    let grads = g.backward(&loss)?;
    let analytic = match grads.get(&x) {
        Some(t) => t.to_vec(),
        None => vec![0.0; point.numel()],
    };

    let eval = |data: Vec<f64>| -> Result<f64> {
        let g = Graph::inference();
        let x = g.constant(Tensor::new(point.shape().to_vec(), data)?);
        f(&g, &x)?.value().item()
    };
    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.to_vec();
        let mut minus = point.to_vec();
        plus[i] += eps;
        minus[i] -= eps;
        numeric.push((eval(plus)? - eval(minus)?) / (2.0 * eps));
    }
    let rel_errors: Vec<f64> = analytic.iter().zip(&numeric).map(|(&a, &n)| relative_error(a, n)).collect();
    let max_rel_error = rel_errors.iter().copied().fold(0.0, f64::max);
    Ok(GradCheckReport { analytic, numeric, rel_errors, max_rel_error })
}
