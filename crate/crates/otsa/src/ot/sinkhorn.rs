use crate::autodiff::{Array, Tensor};

use super::types::{CostMatrix, Marginals, ScalingVectors, SinkhornConfig, TransportPlan};
use super::OtError;

/// Entropic optimal transport by alternating column/row rescaling of the
/// Gibbs kernel `exp(-C/tau)`.
///
/// Each sweep normalizes columns to `b` first and rows to `a` second, so a
/// single sweep with unit marginals reproduces the softmax-then-normalize
/// attention pattern on `-C`. Iterations stop once the maximum absolute
/// marginal violation drops below `cfg.tolerance` or the sweep budget is
/// exhausted. The returned [`ScalingVectors`] reproduce the emitted plan
/// exactly when re-applied and can warm-start a later solve on a nearby cost.
///
/// The whole computation is expressed in tape primitives, so the plan is
/// differentiable through the unrolled sweeps whenever `cost` (or the
/// marginals) carry a tape link.
pub fn sinkhorn(
    cost: &CostMatrix,
    marg: &Marginals,
    cfg: &SinkhornConfig,
    warm: Option<&ScalingVectors>,
) -> Result<(TransportPlan, ScalingVectors), OtError> {
    cfg.validate()?;
    marg.check_dims(cost)?;
    if marg.total_mass() <= 0.0 {
        return Err(OtError::ZeroMass);
    }
    if let Some(w) = warm {
        if w.u().len() != cost.rows() || w.v().len() != cost.cols() {
            return Err(OtError::WarmStartDimensions {
                rows: cost.rows(),
                cols: cost.cols(),
                got_u: w.u().len(),
                got_v: w.v().len(),
            });
        }
    }
    if cfg.use_log_domain() {
        log_domain(cost, marg, cfg, warm)
    } else {
        plain_domain(cost, marg, cfg, warm)
    }
}

fn warm_plain(warm: Option<&ScalingVectors>, m: usize, n: usize) -> Result<(Tensor, Tensor), OtError> {
    match warm {
        None => Ok((
            Tensor::from(Array::ones(vec![m, 1])),
            Tensor::from(Array::ones(vec![n, 1])),
        )),
        Some(w) if !w.is_log_domain() => Ok((w.u().clone(), w.v().clone())),
        Some(w) => Ok((w.u().exp()?, w.v().exp()?)),
    }
}

fn warm_log(warm: Option<&ScalingVectors>, m: usize, n: usize) -> Result<(Tensor, Tensor), OtError> {
    match warm {
        None => Ok((
            Tensor::from(Array::zeros(vec![m, 1])),
            Tensor::from(Array::zeros(vec![n, 1])),
        )),
        Some(w) if w.is_log_domain() => Ok((w.u().clone(), w.v().clone())),
        Some(w) => Ok((w.u().log()?, w.v().log()?)),
    }
}

fn max_abs_violation(scaled: &[f64], target: &[f64]) -> f64 {
    scaled
        .iter()
        .zip(target)
        .fold(0.0f64, |acc, (s, t)| acc.max((s - t).abs()))
}

fn plain_domain(
    cost: &CostMatrix,
    marg: &Marginals,
    cfg: &SinkhornConfig,
    warm: Option<&ScalingVectors>,
) -> Result<(TransportPlan, ScalingVectors), OtError> {
    let (m, n) = (cost.rows(), cost.cols());
    let tau = cfg.temperature;
    let kernel = cost.tensor().scale(-1.0 / tau)?.exp()?;
    let kernel_t = kernel.transpose()?;
    let a_col = marg.a().reshape(vec![m, 1])?;
    let b_col = marg.b().reshape(vec![n, 1])?;

    let (mut u, mut v) = warm_plain(warm, m, n)?;
    let mut kv = kernel.matmul(&v)?;
    let mut sweeps = 0usize;
    let mut converged = false;

    loop {
        let ktu = kernel_t.matmul(&u)?;
        // Violations are a pure value computation; they never hit the tape.
        let row: Vec<f64> = u
            .data()
            .iter()
            .zip(kv.data())
            .map(|(uu, kk)| uu * kk)
            .collect();
        let col: Vec<f64> = v
            .data()
            .iter()
            .zip(ktu.data())
            .map(|(vv, kk)| vv * kk)
            .collect();
        let viol = max_abs_violation(&row, marg.a().data())
            .max(max_abs_violation(&col, marg.b().data()));
        if viol <= cfg.tolerance {
            converged = true;
            break;
        }
        if sweeps == cfg.max_iterations {
            break;
        }
        // Column scaling to b, then row scaling to a.
        v = b_col.div(&ktu).map_err(|_| OtError::NonFinite {
            iteration: sweeps,
            temperature: tau,
        })?;
        kv = kernel.matmul(&v)?;
        u = a_col.div(&kv).map_err(|_| OtError::NonFinite {
            iteration: sweeps,
            temperature: tau,
        })?;
        sweeps += 1;
        if !u.array().all_finite() || !v.array().all_finite() {
            return Err(OtError::NonFinite {
                iteration: sweeps,
                temperature: tau,
            });
        }
    }

    let outer = u.matmul(&v.transpose()?)?;
    let values = kernel.mul(&outer)?;
    if !values.array().all_finite() {
        return Err(OtError::NonFinite {
            iteration: sweeps,
            temperature: tau,
        });
    }
    Ok((
        TransportPlan {
            values,
            converged,
            iterations: sweeps,
        },
        ScalingVectors {
            u,
            v,
            log_domain: false,
        },
    ))
}

fn log_domain(
    cost: &CostMatrix,
    marg: &Marginals,
    cfg: &SinkhornConfig,
    warm: Option<&ScalingVectors>,
) -> Result<(TransportPlan, ScalingVectors), OtError> {
    let (m, n) = (cost.rows(), cost.cols());
    let tau = cfg.temperature;
    if let Some(index) = marg
        .a()
        .data()
        .iter()
        .chain(marg.b().data())
        .position(|&x| x == 0.0)
    {
        return Err(OtError::ZeroMarginalLogDomain { index });
    }

    // Work with the already-divided potentials log_u = f/tau, log_v = g/tau,
    // so the log-plan is log_u 1^T + 1 log_v^T - C/tau.
    let neg_c_tau = cost.tensor().scale(-1.0 / tau)?;
    let log_a = marg.a().reshape(vec![m, 1])?.log()?;
    let log_b = marg.b().reshape(vec![n, 1])?.log()?;

    let (mut log_u, mut log_v) = warm_log(warm, m, n)?;
    let mut sweeps = 0usize;
    let mut converged = false;

    loop {
        // Value-side violation check on the current potentials.
        let viol = log_violation(
            neg_c_tau.data(),
            log_u.data(),
            log_v.data(),
            marg.a().data(),
            marg.b().data(),
            m,
            n,
        );
        if viol <= cfg.tolerance {
            converged = true;
            break;
        }
        if sweeps == cfg.max_iterations {
            break;
        }
        // Column scaling: log_v = log b - lse_rows(-C/tau + log_u).
        let with_u = neg_c_tau.add(&log_u.broadcast_cols(n)?)?;
        log_v = log_b.sub(&with_u.logsumexp_axis(0)?.transpose()?)?;
        // Row scaling: log_u = log a - lse_cols(-C/tau + log_v).
        let with_v = neg_c_tau.add(&log_v.transpose()?.broadcast_rows(m)?)?;
        log_u = log_a.sub(&with_v.logsumexp_axis(1)?)?;
        sweeps += 1;
        if !log_u.array().all_finite() || !log_v.array().all_finite() {
            return Err(OtError::NonFinite {
                iteration: sweeps,
                temperature: tau,
            });
        }
    }

    let log_plan = neg_c_tau
        .add(&log_u.broadcast_cols(n)?)?
        .add(&log_v.transpose()?.broadcast_rows(m)?)?;
    let values = log_plan.exp()?;
    Ok((
        TransportPlan {
            values,
            converged,
            iterations: sweeps,
        },
        ScalingVectors {
            u: log_u,
            v: log_v,
            log_domain: true,
        },
    ))
}

/// Max marginal violation of `exp(log_u_i + log_v_j + neg_c_tau_ij)` as plain
/// f64 arithmetic (no tape traffic).
#[allow(clippy::too_many_arguments)]
fn log_violation(
    neg_c_tau: &[f64],
    log_u: &[f64],
    log_v: &[f64],
    a: &[f64],
    b: &[f64],
    m: usize,
    n: usize,
) -> f64 {
    let mut col_sums = vec![0.0f64; n];
    let mut worst = 0.0f64;
    for i in 0..m {
        let mut row_sum = 0.0;
        for j in 0..n {
            let p = (neg_c_tau[i * n + j] + log_u[i] + log_v[j]).exp();
            row_sum += p;
            col_sums[j] += p;
        }
        worst = worst.max((row_sum - a[i]).abs());
    }
    for j in 0..n {
        worst = worst.max((col_sums[j] - b[j]).abs());
    }
    worst
}
