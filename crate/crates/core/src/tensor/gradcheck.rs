//! Central finite-difference gradient checking.
//!
//! The numeric side rebuilds the forward pass from scratch for every probe,
//! so it stays independent of the backward implementation it is checking.
//! All checks run in 64-bit mode.

use crate::error::Result;
use crate::tensor::TensorData;

/// Default step for central differences.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Entries where both gradients are below this magnitude are compared against
/// the floor instead of their own size, which keeps finite-difference noise
/// (~1e-10 at h=1e-5) from dominating the relative error of near-zero slots.
pub const DEFAULT_FLOOR: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest per-entry relative error.
    pub max_rel_error: f64,
    /// Flat index of the worst entry.
    pub worst_index: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn within(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Gradient of `f` at `x` by central differences with step `h`.
pub fn finite_difference_grad<F>(x: &TensorData<f64>, mut f: F, h: f64) -> Result<TensorData<f64>>
where
    F: FnMut(&TensorData<f64>) -> Result<f64>,
{
    let mut grad = TensorData::zeros(x.shape().to_vec());
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Per-entry relative comparison of analytic vs numeric gradients.
pub fn compare_grads(analytic: &TensorData<f64>, numeric: &TensorData<f64>, floor: f64) -> GradCheckReport {
    assert_eq!(analytic.shape(), numeric.shape(), "gradient shape mismatch");
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        checked: analytic.numel(),
    };
    for i in 0..analytic.numel() {
        let a = analytic.data()[i];
        let n = numeric.data()[i];
        let denom = a.abs().max(n.abs()).max(floor);
        let rel = (a - n).abs() / denom;
        if rel > report.max_rel_error {
            report.max_rel_error = rel;
            report.worst_index = i;
            report.analytic_at_worst = a;
            report.numeric_at_worst = n;
        }
    }
    report
}

/// Convenience: analytic-vs-numeric check of `d f / d x` in one call.
pub fn check_against_fd<F>(
    x: &TensorData<f64>,
    analytic: &TensorData<f64>,
    f: F,
    h: f64,
    floor: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&TensorData<f64>) -> Result<f64>,
{
    let numeric = finite_difference_grad(x, f, h)?;
    Ok(compare_grads(analytic, &numeric, floor))
}
