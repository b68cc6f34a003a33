use crate::autodiff::Tensor;

use super::types::{Marginals, TransportPlan};
use super::OtError;

/// Plan entropy `H(P) = -sum_ij P_ij log P_ij`, with `0 log 0 = 0`.
/// Differentiable; the gradient is `-(1 + log P_ij)`.
pub fn entropy(plan: &TransportPlan) -> Result<Tensor, OtError> {
    Ok(plan.values.entropy_term()?.sum_all()?)
}

/// Entropy scaled to `[0, 1]`: `H(P) / (m log n)`, the convention used by the
/// diagnostic sweeps. Requires all-ones row marginals so that a permutation
/// plan scores 0 and the uniform plan scores 1.
pub fn normalized_entropy(plan: &TransportPlan, marg: &Marginals) -> Result<f64, OtError> {
    if !marg.is_all_ones_rows() {
        return Err(OtError::NotAllOnesMarginal);
    }
    let m = plan.rows() as f64;
    let n = plan.cols() as f64;
    Ok(entropy(plan)?.value() / (m * n.ln()))
}
