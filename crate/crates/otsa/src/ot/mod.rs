//! Optimal transport kernels: entropic Sinkhorn transport with general
//! marginals and warm starts, exact unregularized transport, entropy
//! measures, linear assignment, and cost-matrix construction.

mod costs;
mod emd;
mod entropy;
mod hungarian;
mod sinkhorn;
mod types;

pub use costs::{distance_costs, Metric};
pub use emd::{emd_exact, emd_with_sinkhorn_surrogate};
pub use entropy::{entropy, normalized_entropy};
pub use hungarian::{hungarian, Assignment};
pub use sinkhorn::sinkhorn;
pub use types::{CostMatrix, Domain, Marginals, ScalingVectors, SinkhornConfig, TransportPlan};

use crate::autodiff::AdError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OtError {
    #[error("cost matrix must be 2-d and finite: {0}")]
    BadCost(String),
    #[error("marginal entry {index} is negative ({value})")]
    NegativeMarginal { index: usize, value: f64 },
    #[error("marginal masses differ: sum(a) = {sum_a}, sum(b) = {sum_b}")]
    MassMismatch { sum_a: f64, sum_b: f64 },
    #[error("zero-mass marginals")]
    ZeroMass,
    #[error("dimensions disagree: cost is {rows}x{cols}, marginals are {len_a}/{len_b}")]
    DimensionMismatch {
        rows: usize,
        cols: usize,
        len_a: usize,
        len_b: usize,
    },
    #[error("warm-start vectors sized {got_u}/{got_v}, expected {rows}/{cols}")]
    WarmStartDimensions {
        rows: usize,
        cols: usize,
        got_u: usize,
        got_v: usize,
    },
    #[error("non-finite intermediate in sinkhorn at iteration {iteration}; temperature {temperature} is likely too small without log_domain")]
    NonFinite { iteration: usize, temperature: f64 },
    #[error("log-domain sinkhorn requires strictly positive marginals (entry {index} is zero)")]
    ZeroMarginalLogDomain { index: usize },
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
    #[error("max_iterations must be at least 1")]
    BadIterationCap,
    #[error("normalized entropy requires all-ones row marginals")]
    NotAllOnesMarginal,
    #[error("hungarian requires rows <= cols, got {m}x{n}")]
    TooManyRows { m: usize, n: usize },
    #[error("transportation simplex failed to terminate")]
    SimplexStalled,
    #[error("cosine distance undefined for zero-norm row {index} of {side}")]
    ZeroNormRow { side: &'static str, index: usize },
    #[error("feature dimensions differ: {lhs} vs {rhs}")]
    FeatureDimMismatch { lhs: usize, rhs: usize },
    #[error(transparent)]
    Ad(#[from] AdError),
}
