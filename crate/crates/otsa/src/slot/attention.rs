use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Array, Tensor};
use crate::mesh::{mesh, MeshConfig};
use crate::ot::{distance_costs, emd_with_sinkhorn_surrogate, sinkhorn, Marginals};

use super::params::{LinkedGru, LinkedMlp, LinkedParams};
use super::{SaConfig, SaError, SlotInit, Variant};

/// Per-iteration attention matrices and (for the transport variants) the
/// learned marginals they were computed with.
#[derive(Clone, Debug, Default)]
pub struct AttentionTrace {
    pub attention: Vec<Array>,
    pub marginals: Vec<Option<(Array, Array)>>,
}

/// Initial slots. The learned-Gaussian initializer samples
/// `mu + exp(log_std) * eps` per slot; the identical initializer repeats `mu`
/// on every row (the entropy-minimizing variant can break that tie later).
pub fn init_slots<R: Rng>(
    params: &LinkedParams,
    num_slots: usize,
    init: &SlotInit,
    rng: &mut R,
) -> Result<Tensor, SaError> {
    let d = params.slot_mu.shape()[1];
    match init {
        SlotInit::Identical => Ok(params.slot_mu.broadcast_rows(num_slots)?),
        SlotInit::LearnedGaussian => {
            let eps: Vec<f64> = (0..num_slots * d)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            let eps = Tensor::from(Array::from_vec(vec![num_slots, d], eps)?);
            let mu = params.slot_mu.broadcast_rows(num_slots)?;
            let std = params.slot_log_std.exp()?.broadcast_rows(num_slots)?;
            Ok(mu.add(&std.mul(&eps)?)?)
        }
    }
}

/// Attention normalization of the baseline: softmax over the slot axis per
/// input element, then each slot row rescaled to sum to 1. Equivalent to one
/// Sinkhorn sweep on `-Q K^T` with unit marginals.
pub fn baseline_attention(q: &Tensor, k: &Tensor, scale_by_sqrt_dk: bool) -> Result<Tensor, SaError> {
    let (_, d_k) = q.dims2()?;
    let mut logits = q.matmul(&k.transpose()?)?;
    if scale_by_sqrt_dk {
        logits = logits.scale(1.0 / (d_k as f64).sqrt())?;
    }
    normalize_attention(&logits)
}

fn normalize_attention(logits: &Tensor) -> Result<Tensor, SaError> {
    let (_, n) = logits.dims2()?;
    let soft = logits.softmax(0)?;
    let row_sums = soft.sum_axis(1)?;
    if row_sums.data().iter().any(|&s| s <= 0.0) {
        return Err(SaError::ZeroAttentionRow);
    }
    Ok(soft.div(&row_sums.broadcast_cols(n)?)?)
}

fn mlp_scores(x: &Tensor, head: &LinkedMlp) -> Result<Tensor, SaError> {
    let (rows, _) = x.dims2()?;
    let hidden = x
        .matmul(&head.w1)?
        .add(&head.b1.broadcast_rows(rows)?)?
        .relu()?;
    Ok(hidden
        .matmul(&head.w2)?
        .add(&head.b2.broadcast_rows(rows)?)?)
}

/// Learned marginals `a = m softmax(h_a(Z))`, `b = m softmax(h_b(X))`; both
/// sum to the slot count, so the transport problem is balanced.
pub fn learned_marginals(
    z: &Tensor,
    x: &Tensor,
    params: &LinkedParams,
) -> Result<Marginals, SaError> {
    let (m, _) = z.dims2()?;
    let (n, _) = x.dims2()?;
    let a = mlp_scores(z, &params.h_a)?
        .softmax(0)?
        .scale(m as f64)?
        .reshape(vec![m])?;
    let b = mlp_scores(x, &params.h_b)?
        .softmax(0)?
        .scale(m as f64)?
        .reshape(vec![n])?;
    Ok(Marginals::new(a, b)?)
}

/// GRU update applied per slot, with the slot as hidden state. The update
/// gate at 0 leaves the slot unchanged.
fn gru_update(z: &Tensor, inputs: &Tensor, p: &LinkedGru) -> Result<Tensor, SaError> {
    let (m, _) = z.dims2()?;
    let gate = |wx: &Tensor, wh: &Tensor, b: &Tensor, pre: &Tensor| -> Result<Tensor, SaError> {
        Ok(inputs
            .matmul(wx)?
            .add(&pre.matmul(wh)?)?
            .add(&b.broadcast_rows(m)?)?)
    };
    let update = gate(&p.w_xz, &p.w_hz, &p.b_z, z)?.sigmoid()?;
    let reset = gate(&p.w_xr, &p.w_hr, &p.b_r, z)?.sigmoid()?;
    let masked = reset.mul(z)?;
    let candidate = gate(&p.w_xc, &p.w_hc, &p.b_c, &masked)?.tanh()?;
    // z' = (1 - u) * z + u * candidate
    let keep = update.neg()?.add_scalar(1.0)?;
    Ok(keep.mul(z)?.add(&update.mul(&candidate)?)?)
}

fn residual_mlp(z: &Tensor, head: &LinkedMlp) -> Result<Tensor, SaError> {
    let (m, _) = z.dims2()?;
    let hidden = z
        .matmul(&head.w1)?
        .add(&head.b1.broadcast_rows(m)?)?
        .relu()?;
    let out = hidden
        .matmul(&head.w2)?
        .add(&head.b2.broadcast_rows(m)?)?;
    Ok(z.add(&out)?)
}

/// Keys, values and input marginal scores are fixed per forward pass.
struct IterationContext {
    k: Tensor,
    v: Tensor,
}

/// One slot-attention iteration: variant attention over the current slots,
/// then the GRU update `Z <- GRU(Z, A V)`.
pub fn sa_iteration<R: Rng>(
    z: &Tensor,
    x: &Tensor,
    params: &LinkedParams,
    cfg: &SaConfig,
    rng: &mut R,
) -> Result<(Tensor, Array, Option<(Array, Array)>), SaError> {
    let ctx = IterationContext {
        k: x.matmul(&params.w_k)?,
        v: x.matmul(&params.w_v)?,
    };
    iteration_inner(z, x, &ctx, params, cfg, rng)
}

fn iteration_inner<R: Rng>(
    z: &Tensor,
    x: &Tensor,
    ctx: &IterationContext,
    params: &LinkedParams,
    cfg: &SaConfig,
    rng: &mut R,
) -> Result<(Tensor, Array, Option<(Array, Array)>), SaError> {
    let q = z.matmul(&params.w_q)?;
    let (attention, marginals) = match cfg.variant {
        Variant::Sa => {
            let a = baseline_attention(&q, &ctx.k, cfg.scale_by_sqrt_dk)?;
            (a, None)
        }
        Variant::SaSh => {
            let cost = distance_costs(&q, &ctx.k, cfg.metric)?;
            let marg = learned_marginals(z, x, params)?;
            let (plan, _) = sinkhorn(&cost, &marg, &cfg.sinkhorn, None)?;
            let pair = (marg.a().array().clone(), marg.b().array().clone());
            (plan.values, Some(pair))
        }
        Variant::SaEmd => {
            let cost = distance_costs(&q, &ctx.k, cfg.metric)?;
            let marg = learned_marginals(z, x, params)?;
            let plan = emd_with_sinkhorn_surrogate(&cost, &marg, &cfg.sinkhorn)?;
            let pair = (marg.a().array().clone(), marg.b().array().clone());
            (plan.values, Some(pair))
        }
        Variant::SaMesh => {
            let cost = distance_costs(&q, &ctx.k, cfg.metric)?;
            let marg = learned_marginals(z, x, params)?;
            let out = mesh(&cost, &marg, &cfg.mesh, rng)?;
            let pair = (marg.a().array().clone(), marg.b().array().clone());
            (out.plan.values, Some(pair))
        }
    };
    let updates = attention.matmul(&ctx.v)?;
    let mut next = gru_update(z, &updates, &params.gru)?;
    if cfg.residual_mlp {
        if let Some(head) = &params.residual {
            next = residual_mlp(&next, head)?;
        }
    }
    Ok((next, attention.array().clone(), marginals))
}

/// Full forward pass: `iterations` slot updates. With `implicit_diff`, all
/// but the last iteration run detached and only the final iteration (with
/// `Z^(L-1)` held constant) is differentiated, which is the first-order
/// implicit scheme.
pub fn forward<R: Rng>(
    x: &Tensor,
    params: &LinkedParams,
    cfg: &SaConfig,
    rng: &mut R,
) -> Result<(Tensor, AttentionTrace), SaError> {
    cfg.validate()?;
    let mut trace = AttentionTrace::default();

    if cfg.implicit_diff && cfg.iterations > 0 {
        let frozen = detach_params(params);
        let x_const = x.detach();
        let ctx = IterationContext {
            k: x_const.matmul(&frozen.w_k)?,
            v: x_const.matmul(&frozen.w_v)?,
        };
        let mut z = init_slots(&frozen, cfg.num_slots, &cfg.slot_init, rng)?;
        for _ in 0..cfg.iterations - 1 {
            let (next, attn, marg) = iteration_inner(&z, &x_const, &ctx, &frozen, cfg, rng)?;
            trace.attention.push(attn);
            trace.marginals.push(marg);
            z = next;
        }
        let ctx = IterationContext {
            k: x.matmul(&params.w_k)?,
            v: x.matmul(&params.w_v)?,
        };
        let (z_out, attn, marg) = iteration_inner(&z.detach(), x, &ctx, params, cfg, rng)?;
        trace.attention.push(attn);
        trace.marginals.push(marg);
        Ok((z_out, trace))
    } else {
        let ctx = IterationContext {
            k: x.matmul(&params.w_k)?,
            v: x.matmul(&params.w_v)?,
        };
        let mut z = init_slots(params, cfg.num_slots, &cfg.slot_init, rng)?;
        for _ in 0..cfg.iterations {
            let (next, attn, marg) = iteration_inner(&z, x, &ctx, params, cfg, rng)?;
            trace.attention.push(attn);
            trace.marginals.push(marg);
            z = next;
        }
        Ok((z, trace))
    }
}

fn detach_params(params: &LinkedParams) -> LinkedParams {
    LinkedParams {
        w_q: params.w_q.detach(),
        w_k: params.w_k.detach(),
        w_v: params.w_v.detach(),
        gru: LinkedGru {
            w_xz: params.gru.w_xz.detach(),
            w_hz: params.gru.w_hz.detach(),
            b_z: params.gru.b_z.detach(),
            w_xr: params.gru.w_xr.detach(),
            w_hr: params.gru.w_hr.detach(),
            b_r: params.gru.b_r.detach(),
            w_xc: params.gru.w_xc.detach(),
            w_hc: params.gru.w_hc.detach(),
            b_c: params.gru.b_c.detach(),
        },
        h_a: LinkedMlp {
            w1: params.h_a.w1.detach(),
            b1: params.h_a.b1.detach(),
            w2: params.h_a.w2.detach(),
            b2: params.h_a.b2.detach(),
        },
        h_b: LinkedMlp {
            w1: params.h_b.w1.detach(),
            b1: params.h_b.b1.detach(),
            w2: params.h_b.w2.detach(),
            b2: params.h_b.b2.detach(),
        },
        slot_mu: params.slot_mu.detach(),
        slot_log_std: params.slot_log_std.detach(),
    }
}

// Re-exported from the parent so callers see one flat module.
pub(super) use MeshConfig as _MeshConfigUsed;
