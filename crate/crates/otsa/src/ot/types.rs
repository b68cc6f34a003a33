use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Tensor};

use super::OtError;

/// Pairwise cost matrix `C` with finite entries. Carries a tape link when it
/// was produced by differentiable operations.
#[derive(Clone, Debug)]
pub struct CostMatrix {
    values: Tensor,
    rows: usize,
    cols: usize,
}

impl CostMatrix {
    pub fn new(values: Tensor) -> Result<Self, OtError> {
        let (rows, cols) = values
            .dims2()
            .map_err(|e| OtError::BadCost(e.to_string()))?;
        if !values.array().all_finite() {
            return Err(OtError::BadCost("non-finite entry".into()));
        }
        Ok(CostMatrix { values, rows, cols })
    }

    pub fn from_array(values: Array) -> Result<Self, OtError> {
        Self::new(Tensor::from(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn detach(&self) -> CostMatrix {
        CostMatrix {
            values: self.values.detach(),
            rows: self.rows,
            cols: self.cols,
        }
    }
}

/// Target row sums `a` and column sums `b` of a transport plan.
#[derive(Clone, Debug)]
pub struct Marginals {
    a: Tensor,
    b: Tensor,
}

impl Marginals {
    /// Validates nonnegativity and mass balance: `|sum(a) - sum(b)|` must not
    /// exceed `1e-9 * max(sum(a), 1)`.
    pub fn new(a: Tensor, b: Tensor) -> Result<Self, OtError> {
        for (index, &value) in a.data().iter().chain(b.data().iter()).enumerate() {
            if value < 0.0 {
                return Err(OtError::NegativeMarginal { index, value });
            }
        }
        let sum_a: f64 = a.data().iter().sum();
        let sum_b: f64 = b.data().iter().sum();
        if (sum_a - sum_b).abs() > 1e-9 * sum_a.max(1.0) {
            return Err(OtError::MassMismatch { sum_a, sum_b });
        }
        Ok(Marginals { a, b })
    }

    /// All-ones marginals for a square `n x n` problem.
    pub fn all_ones(n: usize) -> Self {
        Marginals {
            a: Tensor::from(Array::ones(vec![n])),
            b: Tensor::from(Array::ones(vec![n])),
        }
    }

    /// All-ones rows with column mass spread uniformly: `a = 1_m`,
    /// `b = (m/n) 1_n`. Total mass `m` on both sides.
    pub fn uniform_rows(m: usize, n: usize) -> Self {
        Marginals {
            a: Tensor::from(Array::ones(vec![m])),
            b: Tensor::from(Array::full(vec![n], m as f64 / n as f64)),
        }
    }

    pub fn a(&self) -> &Tensor {
        &self.a
    }

    pub fn b(&self) -> &Tensor {
        &self.b
    }

    pub fn len_a(&self) -> usize {
        self.a.len()
    }

    pub fn len_b(&self) -> usize {
        self.b.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.a.data().iter().sum()
    }

    pub fn detach(&self) -> Marginals {
        Marginals {
            a: self.a.detach(),
            b: self.b.detach(),
        }
    }

    pub fn is_all_ones_rows(&self) -> bool {
        self.a.data().iter().all(|&x| (x - 1.0).abs() <= 1e-12)
    }

    pub(crate) fn check_dims(&self, cost: &CostMatrix) -> Result<(), OtError> {
        if self.len_a() != cost.rows() || self.len_b() != cost.cols() {
            return Err(OtError::DimensionMismatch {
                rows: cost.rows(),
                cols: cost.cols(),
                len_a: self.len_a(),
                len_b: self.len_b(),
            });
        }
        Ok(())
    }
}

/// How the Sinkhorn scaling iterations are carried out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    /// Log-domain for temperatures below 0.05, plain-domain otherwise.
    #[default]
    Auto,
    Plain,
    Log,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SinkhornConfig {
    pub temperature: f64,
    pub max_iterations: usize,
    /// Convergence tolerance on the maximum absolute marginal violation.
    pub tolerance: f64,
    pub domain: Domain,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig {
            temperature: 1.0,
            max_iterations: 1000,
            tolerance: 1e-6,
            domain: Domain::Auto,
        }
    }
}

impl SinkhornConfig {
    /// Fixed-budget configuration that always runs exactly `n` sweeps.
    pub fn fixed_iterations(n: usize, temperature: f64) -> Self {
        SinkhornConfig {
            temperature,
            max_iterations: n,
            tolerance: 0.0,
            domain: Domain::Auto,
        }
    }

    pub fn use_log_domain(&self) -> bool {
        match self.domain {
            Domain::Auto => self.temperature < 0.05,
            Domain::Plain => false,
            Domain::Log => true,
        }
    }

    pub(crate) fn validate(&self) -> Result<(), OtError> {
        if !(self.temperature > 0.0) {
            return Err(OtError::BadTemperature(self.temperature));
        }
        if self.max_iterations < 1 {
            return Err(OtError::BadIterationCap);
        }
        Ok(())
    }
}

/// Collected Sinkhorn row/column normalizers. In log-domain mode `u` and `v`
/// hold logarithms; they are strictly positive (finite logs) otherwise.
#[derive(Clone, Debug)]
pub struct ScalingVectors {
    /// Row scalings, shape `[m, 1]`.
    pub(crate) u: Tensor,
    /// Column scalings, shape `[n, 1]`.
    pub(crate) v: Tensor,
    pub(crate) log_domain: bool,
}

impl ScalingVectors {
    pub fn u(&self) -> &Tensor {
        &self.u
    }

    pub fn v(&self) -> &Tensor {
        &self.v
    }

    pub fn is_log_domain(&self) -> bool {
        self.log_domain
    }

    pub fn detach(&self) -> ScalingVectors {
        ScalingVectors {
            u: self.u.detach(),
            v: self.v.detach(),
            log_domain: self.log_domain,
        }
    }

    /// Re-applies the collected scalings to the Gibbs kernel of `cost`:
    /// reconstructs the plan this pair of vectors was emitted with.
    pub fn apply(&self, cost: &CostMatrix, temperature: f64) -> Result<Tensor, OtError> {
        let n = cost.cols();
        if self.log_domain {
            // exp((f + g - C) / tau) with u = f/tau, v = g/tau already divided.
            let f_b = self.u.broadcast_cols(n)?;
            let g_b = self.v.transpose()?.broadcast_rows(cost.rows())?;
            let log_plan = cost
                .tensor()
                .scale(-1.0 / temperature)?
                .add(&f_b)?
                .add(&g_b)?;
            Ok(log_plan.exp()?)
        } else {
            let kernel = cost.tensor().scale(-1.0 / temperature)?.exp()?;
            let outer = self.u.matmul(&self.v.transpose()?)?;
            Ok(kernel.mul(&outer)?)
        }
    }
}

/// A coupling between two marginals: nonnegative `m x n` matrix whose row and
/// column sums approach `a` and `b` at convergence.
#[derive(Clone, Debug)]
pub struct TransportPlan {
    pub values: Tensor,
    pub converged: bool,
    pub iterations: usize,
}

impl TransportPlan {
    pub fn rows(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn cols(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let (m, n) = (self.rows(), self.cols());
        let d = self.values.data();
        (0..m).map(|i| d[i * n..(i + 1) * n].iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let (m, n) = (self.rows(), self.cols());
        let d = self.values.data();
        (0..n).map(|j| (0..m).map(|i| d[i * n + j]).sum()).collect()
    }

    /// Largest absolute deviation of the row/column sums from the marginals.
    pub fn marginal_violation(&self, marg: &Marginals) -> f64 {
        let rows = self.row_sums();
        let cols = self.col_sums();
        let row_viol = rows
            .iter()
            .zip(marg.a().data())
            .fold(0.0f64, |acc, (s, t)| acc.max((s - t).abs()));
        let col_viol = cols
            .iter()
            .zip(marg.b().data())
            .fold(0.0f64, |acc, (s, t)| acc.max((s - t).abs()));
        row_viol.max(col_viol)
    }

    /// Total transport cost `sum_ij C_ij P_ij`.
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        cost.tensor()
            .data()
            .iter()
            .zip(self.values.data())
            .map(|(c, p)| c * p)
            .sum()
    }

    pub fn nonzeros(&self) -> usize {
        self.values.data().iter().filter(|&&p| p != 0.0).count()
    }
}
