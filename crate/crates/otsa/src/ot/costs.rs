use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

use super::types::CostMatrix;
use super::OtError;

/// Pairwise distance used to build the transport cost from queries and keys.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    /// Negative dot product, the usual cross-attention score.
    NegDot,
    /// Half squared Euclidean distance. Differs from the negative dot product
    /// only by rank-1 row/column shifts, which Sinkhorn ignores.
    #[default]
    L2,
    /// Cosine distance `1 - <q,k> / (|q||k|)`. Rows must have nonzero norm.
    Cosine,
}

impl Metric {
    pub fn parse(s: &str) -> Option<Metric> {
        match s {
            "neg_dot" | "neg-dot" | "dot" => Some(Metric::NegDot),
            "l2" => Some(Metric::L2),
            "cosine" => Some(Metric::Cosine),
            _ => None,
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::NegDot => write!(f, "neg_dot"),
            Metric::L2 => write!(f, "l2"),
            Metric::Cosine => write!(f, "cosine"),
        }
    }
}

/// Cost matrix `C_ij = d(Q_i, K_j)` for rows of `q` (m x d) and `k` (n x d).
/// Differentiable in both inputs.
pub fn distance_costs(q: &Tensor, k: &Tensor, metric: Metric) -> Result<CostMatrix, OtError> {
    let (m, d) = q.dims2()?;
    let (n, dk) = k.dims2()?;
    if d != dk {
        return Err(OtError::FeatureDimMismatch { lhs: d, rhs: dk });
    }
    let qk = q.matmul(&k.transpose()?)?;
    let values = match metric {
        Metric::NegDot => qk.neg()?,
        Metric::L2 => {
            let q_sq = q.mul(q)?.sum_axis(1)?.scale(0.5)?; // [m, 1]
            let k_sq = k.mul(k)?.sum_axis(1)?.scale(0.5)?; // [n, 1]
            q_sq.broadcast_cols(n)?
                .add(&k_sq.transpose()?.broadcast_rows(m)?)?
                .sub(&qk)?
        }
        Metric::Cosine => {
            let q_sq = q.mul(q)?.sum_axis(1)?;
            let k_sq = k.mul(k)?.sum_axis(1)?;
            if let Some(index) = q_sq.data().iter().position(|&x| x == 0.0) {
                return Err(OtError::ZeroNormRow { side: "q", index });
            }
            if let Some(index) = k_sq.data().iter().position(|&x| x == 0.0) {
                return Err(OtError::ZeroNormRow { side: "k", index });
            }
            let norms = q_sq.sqrt()?.matmul(&k_sq.sqrt()?.transpose()?)?;
            qk.div(&norms)?.neg()?.add_scalar(1.0)?
        }
    };
    CostMatrix::new(values)
}
