use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Outcome of a central-difference comparison.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `max_i |numeric_i - analytic_i| / max(1, |analytic_i|)`.
    pub max_rel_error: f64,
    /// Coordinate where the maximum occurred.
    pub worst_index: usize,
    pub coordinates: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Compare `analytic` against central differences of `f` around `x`.
///
/// `f` must be smooth at `x`; a non-finite evaluation is reported as an error.
pub fn finite_diff_check<F>(mut f: F, x: &Tensor, analytic: &Tensor, eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps <= 0.0 {
        return Err(Error::Usage(format!("finite difference step must be positive, got {eps}")));
    }
    if analytic.shape() != x.shape() {
        return Err(Error::dim(format!(
            "analytic gradient {:?} does not match input {:?}",
            analytic.shape(),
            x.shape()
        )));
    }
    let mut probe = x.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_index: 0, coordinates: x.numel() };
    for i in 0..x.numel() {
        let orig = x.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: format!("finite difference probe at coordinate {i}") });
        }
        let numeric = (plus - minus) / (2.0 * eps);
        let g = analytic.data()[i];
        let err = (numeric - g).abs() / g.abs().max(1.0);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = i;
        }
    }
    Ok(report)
}
