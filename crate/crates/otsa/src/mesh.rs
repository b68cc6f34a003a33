//! Entropy minimization of the Sinkhorn plan ("MESH"): perturb the cost with
//! tiny noise, then descend the entropy of the entropic transport plan with
//! norm-clipped gradient steps on the cost matrix. The resulting plans are
//! near-binary like unregularized transport while staying differentiable and
//! cheap to compute, and the noise breaks ties between equal rows or columns
//! that plain Sinkhorn can never separate.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Array, Tape, Tensor};
use crate::ot::{
    entropy, sinkhorn, CostMatrix, Marginals, OtError, ScalingVectors, SinkhornConfig,
    TransportPlan,
};

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("invalid mesh configuration: {0}")]
    BadConfig(String),
    #[error("non-finite entropy gradient at mesh step {step}")]
    NonFiniteGradient { step: usize },
    #[error(transparent)]
    Ot(#[from] OtError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

/// Similarity-regularized objective: adds
/// `alpha * || S . sinkhorn(C') - sinkhorn(C) ||^2` so mass may move freely
/// among similar slots but not across dissimilar ones. `s` is an `m x m`
/// column-stochastic matrix acting on the slot (row) side of the plan.
#[derive(Clone, Debug)]
pub struct SimilarityPenalty {
    pub alpha: f64,
    pub s: Array,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeshConfig {
    /// Number of cost-update steps `T`.
    pub steps: usize,
    /// Step size applied to the unit-norm gradient.
    pub learning_rate: f64,
    /// Standard deviation of the Gaussian perturbation on the initial cost.
    pub noise_std: f64,
    /// Budgeted Sinkhorn settings for the per-step inner solves.
    pub inner: SinkhornConfig,
    /// To-tolerance Sinkhorn settings for the final plan.
    pub outer: SinkhornConfig,
    /// Treat the cost updates as identity during backprop (gradients of the
    /// final plan flow straight into the original cost).
    pub straight_through: bool,
    /// Reuse each step's scaling vectors to warm-start the next inner solve.
    pub reuse_scalings: bool,
    #[serde(skip)]
    pub similarity: Option<SimilarityPenalty>,
}

impl Default for MeshConfig {
    fn default() -> Self {
        MeshConfig {
            steps: 4,
            learning_rate: 1.0,
            noise_std: 1e-3,
            inner: SinkhornConfig::fixed_iterations(5, 1.0),
            outer: SinkhornConfig::default(),
            straight_through: true,
            reuse_scalings: true,
            similarity: None,
        }
    }
}

impl MeshConfig {
    fn validate(&self, rows: usize) -> Result<(), MeshError> {
        if self.steps < 1 {
            return Err(MeshError::BadConfig("steps must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(MeshError::BadConfig(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.noise_std < 0.0 {
            return Err(MeshError::BadConfig("noise_std must be nonnegative".into()));
        }
        if let Some(sim) = &self.similarity {
            if sim.alpha < 0.0 {
                return Err(MeshError::BadConfig("alpha must be nonnegative".into()));
            }
            if sim.s.shape() != [rows, rows] {
                return Err(MeshError::BadConfig(format!(
                    "similarity matrix shape {:?}, expected [{rows}, {rows}]",
                    sim.s.shape()
                )));
            }
            for j in 0..rows {
                let col: f64 = (0..rows).map(|i| sim.s.get2(i, j)).sum();
                if (col - 1.0).abs() > 1e-9 {
                    return Err(MeshError::BadConfig(format!(
                        "similarity matrix column {j} sums to {col}, expected 1"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One entropy-descent step as recorded in the trace.
#[derive(Clone, Debug)]
pub struct MeshStep {
    /// Cost the step's inner solve ran on.
    pub cost: Array,
    /// Inner transport plan at that cost.
    pub plan: Array,
    /// Entropy of that plan.
    pub entropy: f64,
    /// Scaling vectors emitted by the inner solve.
    pub scalings: ScalingVectors,
    /// True when the update was skipped because the gradient norm vanished.
    pub skipped: bool,
}

#[derive(Clone, Debug)]
pub struct MeshTrace {
    pub steps: Vec<MeshStep>,
    /// Final perturbed-and-descended cost `C'`.
    pub final_cost: Array,
}

pub struct MeshOutput {
    /// The adjusted cost; linked so upstream gradients reach the original
    /// cost (identically under straight-through, through the unrolled updates
    /// otherwise).
    pub cost: CostMatrix,
    pub plan: TransportPlan,
    pub trace: MeshTrace,
}

const ZERO_GRADIENT_EPS: f64 = 1e-12;

/// Runs `T` norm-clipped gradient steps minimizing the entropy of the inner
/// Sinkhorn plan, starting from `cost` plus Gaussian noise, then solves the
/// final plan to the outer tolerance.
pub fn mesh<R: Rng>(
    cost: &CostMatrix,
    marg: &Marginals,
    cfg: &MeshConfig,
    rng: &mut R,
) -> Result<MeshOutput, MeshError> {
    cfg.validate(cost.rows())?;

    let (m, n) = (cost.rows(), cost.cols());
    let noise = if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("validated noise_std");
        let data: Vec<f64> = (0..m * n).map(|_| normal.sample(rng)).collect();
        Array::from_vec(vec![m, n], data)?
    } else {
        Array::zeros(vec![m, n])
    };

    // Reference plan for the similarity penalty: Sinkhorn of the original,
    // unperturbed cost, computed once and detached.
    let reference = match &cfg.similarity {
        Some(sim) if sim.alpha > 0.0 => {
            let (p, _) = sinkhorn(&cost.detach(), &marg.detach(), &cfg.outer, None)?;
            Some(p.values.detach())
        }
        _ => None,
    };

    if cfg.straight_through {
        mesh_straight_through(cost, marg, cfg, noise, reference)
    } else {
        mesh_unrolled(cost, marg, cfg, noise, reference)
    }
}

fn objective(
    plan: &TransportPlan,
    cfg: &MeshConfig,
    reference: &Option<Tensor>,
) -> Result<(Tensor, f64), MeshError> {
    let h = entropy(plan)?;
    let h_value = h.value();
    let obj = match (&cfg.similarity, reference) {
        (Some(sim), Some(r)) if sim.alpha > 0.0 => {
            let s = Tensor::from(sim.s.clone());
            let diff = s.matmul(&plan.values)?.sub(r)?;
            let penalty = diff.mul(&diff)?.sum_all()?.scale(sim.alpha)?;
            h.add(&penalty)?
        }
        _ => h,
    };
    Ok((obj, h_value))
}

fn mesh_straight_through(
    cost: &CostMatrix,
    marg: &Marginals,
    cfg: &MeshConfig,
    noise: Array,
    reference: Option<Tensor>,
) -> Result<MeshOutput, MeshError> {
    let marg_inner = marg.detach();
    // Value-side initialization C + noise; the inner loop never touches the
    // caller's tape.
    let mut current: Array = cost
        .tensor()
        .detach()
        .add(&Tensor::from(noise))?
        .array()
        .clone();

    let mut warm: Option<ScalingVectors> = None;
    let mut steps = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let tape = Tape::new();
        let ct = tape.watch(current.clone());
        let cost_t = CostMatrix::new(ct.clone())?;
        let (plan, scalings) = sinkhorn(&cost_t, &marg_inner, &cfg.inner, warm.as_ref())?;
        let (obj, h_value) = objective(&plan, cfg, &reference)?;
        let grads = obj.backward()?;
        let g = grads.wrt_or_zeros(&ct);
        if !g.array().all_finite() {
            return Err(MeshError::NonFiniteGradient { step });
        }
        let norm = g.array().frobenius_norm();
        let skipped = norm < ZERO_GRADIENT_EPS;
        let next = if skipped {
            current.clone()
        } else {
            let scale = cfg.learning_rate / norm;
            let data: Vec<f64> = current
                .data()
                .iter()
                .zip(g.data())
                .map(|(c, gv)| c - scale * gv)
                .collect();
            Array::from_vec(vec![cost.rows(), cost.cols()], data)?
        };
        let scalings = scalings.detach();
        if cfg.reuse_scalings {
            warm = Some(scalings.clone());
        }
        steps.push(MeshStep {
            cost: current.clone(),
            plan: plan.values.array().clone(),
            entropy: h_value,
            scalings,
            skipped,
        });
        current = next;
    }

    // Straight-through wiring: forward the descended cost bit-exactly while
    // the backward pass sees d(C')/dC = I.
    let zero = cost.tensor().sub(&cost.tensor().detach())?;
    let final_tensor = Tensor::from(current.clone()).add(&zero)?;
    let final_cost = CostMatrix::new(final_tensor)?;
    let (plan, _) = sinkhorn(&final_cost, marg, &cfg.outer, warm.as_ref())?;

    Ok(MeshOutput {
        cost: final_cost,
        plan,
        trace: MeshTrace {
            steps,
            final_cost: current,
        },
    })
}

fn mesh_unrolled(
    cost: &CostMatrix,
    marg: &Marginals,
    cfg: &MeshConfig,
    noise: Array,
    reference: Option<Tensor>,
) -> Result<MeshOutput, MeshError> {
    let mut ct = cost.tensor().add(&Tensor::from(noise))?;
    let mut warm: Option<ScalingVectors> = None;
    let mut steps = Vec::with_capacity(cfg.steps);

    for step in 0..cfg.steps {
        let cost_t = CostMatrix::new(ct.clone())?;
        let (plan, scalings) = sinkhorn(&cost_t, marg, &cfg.inner, warm.as_ref())?;
        let (obj, h_value) = objective(&plan, cfg, &reference)?;
        // Recorded backward: the gradient stays on the tape so the update
        // below remains differentiable end to end.
        let grads = obj.backward_with(None, true)?;
        let g = grads.wrt_or_zeros(&ct);
        if !g.array().all_finite() {
            return Err(MeshError::NonFiniteGradient { step });
        }
        let norm_value = g.array().frobenius_norm();
        let skipped = norm_value < ZERO_GRADIENT_EPS;
        if !skipped {
            let norm = g.mul(&g)?.sum_all()?.sqrt()?;
            let update = g.scale(cfg.learning_rate)?.div(&norm)?;
            ct = ct.sub(&update)?;
        }
        if cfg.reuse_scalings {
            warm = Some(scalings.clone());
        }
        steps.push(MeshStep {
            cost: ct.array().clone(),
            plan: plan.values.array().clone(),
            entropy: h_value,
            scalings: scalings.detach(),
            skipped,
        });
    }

    let final_cost = CostMatrix::new(ct)?;
    let (plan, _) = sinkhorn(&final_cost, marg, &cfg.outer, warm.as_ref())?;
    let final_values = final_cost.tensor().array().clone();
    Ok(MeshOutput {
        cost: final_cost,
        plan,
        trace: MeshTrace {
            steps,
            final_cost: final_values,
        },
    })
}

/// Result of [`straight_through_gradient_check`].
#[derive(Clone, Debug)]
pub struct StraightThroughReport {
    /// Max |grad via mesh - grad via direct sinkhorn at C'| for L = sum(plan).
    pub sum_loss_max_diff: f64,
    /// Same comparison for L = entropy(plan).
    pub entropy_loss_max_diff: f64,
    /// Max |straight-through grad - fully unrolled grad| for L = entropy(plan).
    /// (The plan's sum is pinned by the marginals, so only a loss that varies
    /// with the plan separates the two modes.)
    pub straight_vs_unrolled: f64,
}

impl StraightThroughReport {
    pub fn passed(&self) -> bool {
        self.sum_loss_max_diff <= 1e-12 && self.entropy_loss_max_diff <= 1e-12
    }
}

/// Verifies the straight-through wiring: the gradient of a loss on the mesh
/// plan with respect to the original cost must coincide with the gradient of
/// the same loss through a plain Sinkhorn solve evaluated at the descended
/// cost `C'`, and differs from the fully unrolled gradient in general.
pub fn straight_through_gradient_check(
    cost: &CostMatrix,
    marg: &Marginals,
    cfg: &MeshConfig,
    seed: u64,
) -> Result<StraightThroughReport, MeshError> {
    use rand::SeedableRng;
    if !cfg.straight_through {
        return Err(MeshError::BadConfig(
            "straight_through_gradient_check requires straight_through".into(),
        ));
    }

    let grad_pair = |use_entropy: bool| -> Result<(Array, Array), MeshError> {
        // Mesh route.
        let tape = Tape::new();
        let ct = tape.watch(cost.tensor().array().clone());
        let mesh_cost = CostMatrix::new(ct.clone())?;
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
        let out = mesh(&mesh_cost, marg, cfg, &mut rng)?;
        let loss = if use_entropy {
            entropy(&out.plan)?
        } else {
            out.plan.values.sum_all()?
        };
        let g_mesh = loss.backward()?.wrt_or_zeros(&ct).array().clone();

        // Direct route: the same outer solve at C', warm-started identically.
        let warm = out
            .trace
            .steps
            .last()
            .filter(|_| cfg.reuse_scalings)
            .map(|s| s.scalings.clone());
        let tape2 = Tape::new();
        let ct2 = tape2.watch(out.trace.final_cost.clone());
        let direct_cost = CostMatrix::new(ct2.clone())?;
        let (plan, _) = sinkhorn(&direct_cost, marg, &cfg.outer, warm.as_ref())?;
        let loss = if use_entropy {
            entropy(&plan)?
        } else {
            plan.values.sum_all()?
        };
        let g_direct = loss.backward()?.wrt_or_zeros(&ct2).array().clone();
        Ok((g_mesh, g_direct))
    };

    let (g_mesh_sum, g_direct_sum) = grad_pair(false)?;
    let (g_mesh_h, g_direct_h) = grad_pair(true)?;

    // Fully unrolled gradient with the same noise for the mode comparison.
    let tape = Tape::new();
    let ct = tape.watch(cost.tensor().array().clone());
    let mesh_cost = CostMatrix::new(ct.clone())?;
    let unrolled_cfg = MeshConfig {
        straight_through: false,
        ..cfg.clone()
    };
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(seed);
    let out = mesh(&mesh_cost, marg, &unrolled_cfg, &mut rng)?;
    let g_unrolled = entropy(&out.plan)?
        .backward()?
        .wrt_or_zeros(&ct)
        .array()
        .clone();

    Ok(StraightThroughReport {
        sum_loss_max_diff: g_mesh_sum.max_abs_diff(&g_direct_sum),
        entropy_loss_max_diff: g_mesh_h.max_abs_diff(&g_direct_h),
        straight_vs_unrolled: g_mesh_h.max_abs_diff(&g_unrolled),
    })
}
