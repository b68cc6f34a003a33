//! Central finite-difference gradient checking.
//!
//! Evaluates the function numerically, with no dependence on the tape, so it
//! can serve as an independent oracle for reverse-mode gradients.

use crate::autodiff::Array;

/// Central-difference step used across the test suites.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Gradient of scalar-valued `f` at `x` by central differences.
pub fn central_diff(f: &mut dyn FnMut(&Array) -> f64, x: &Array, step: f64) -> Array {
    let base = x.data().to_vec();
    let mut grad = vec![0.0; base.len()];
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += step;
        let mut minus = base.clone();
        minus[i] -= step;
        let fp = f(&Array::from_vec(x.shape().to_vec(), plus).unwrap());
        let fm = f(&Array::from_vec(x.shape().to_vec(), minus).unwrap());
        grad[i] = (fp - fm) / (2.0 * step);
    }
    Array::from_vec(x.shape().to_vec(), grad).unwrap()
}

/// Relative error between an analytic gradient and its finite-difference
/// estimate: `max|a - b| / max(1, ||b||_inf)`.
pub fn relative_error(analytic: &Array, numeric: &Array) -> f64 {
    let denom = numeric.max_abs().max(1.0);
    analytic.max_abs_diff(numeric) / denom
}
