use crate::autodiff::{Array, Tensor};

use super::sinkhorn::sinkhorn;
use super::types::{CostMatrix, Marginals, SinkhornConfig, TransportPlan};
use super::OtError;

const REDUCED_COST_EPS: f64 = 1e-11;

/// Exact unregularized optimal transport by the transportation simplex.
///
/// Entering variables follow Bland's rule (lowest flat index with negative
/// reduced cost) and the leaving variable breaks ties toward the lowest
/// index, which makes the pivots anti-cycling and the returned vertex
/// deterministic for a given input ordering. The plan is a vertex of the
/// transportation polytope: at most `m + n - 1` nonzeros.
pub fn emd_exact(cost: &CostMatrix, marg: &Marginals) -> Result<TransportPlan, OtError> {
    marg.check_dims(cost)?;
    if marg.total_mass() <= 0.0 {
        return Err(OtError::ZeroMass);
    }
    let (m, n) = (cost.rows(), cost.cols());
    let c = cost.tensor().data();
    let a = marg.a().data();
    let b = marg.b().data();

    let mut flow = vec![0.0f64; m * n];
    let mut in_basis = vec![false; m * n];
    let mut basis: Vec<(usize, usize)> = Vec::with_capacity(m + n - 1);

    // Northwest-corner start: exactly m + n - 1 basic cells, some possibly
    // carrying zero flow (degenerate).
    {
        let mut ra = a.to_vec();
        let mut rb = b.to_vec();
        let (mut i, mut j) = (0usize, 0usize);
        loop {
            let q = ra[i].min(rb[j]);
            flow[i * n + j] = q;
            in_basis[i * n + j] = true;
            basis.push((i, j));
            ra[i] -= q;
            rb[j] -= q;
            if i == m - 1 && j == n - 1 {
                break;
            }
            if (ra[i] <= rb[j] && i < m - 1) || j == n - 1 {
                i += 1;
            } else {
                j += 1;
            }
        }
    }

    let mut pivots = 0usize;
    let pivot_cap = 1000 + 50 * m * n;
    loop {
        if pivots > pivot_cap {
            return Err(OtError::SimplexStalled);
        }

        // Dual potentials from the basis tree: u_i + v_j = c_ij on basics.
        let (u, v) = potentials(m, n, &basis, c);

        // Entering variable: first (row-major) nonbasic cell with negative
        // reduced cost.
        let mut entering = None;
        'scan: for i in 0..m {
            for j in 0..n {
                if in_basis[i * n + j] {
                    continue;
                }
                if c[i * n + j] - u[i] - v[j] < -REDUCED_COST_EPS {
                    entering = Some((i, j));
                    break 'scan;
                }
            }
        }
        let Some((ei, ej)) = entering else { break };

        // The unique tree path from row ei to column ej, plus the entering
        // arc, forms the pivot cycle. Signs alternate starting with + on the
        // entering cell.
        let path = tree_path(m, n, &basis, ei, ej);
        let mut cycle: Vec<(usize, usize)> = Vec::with_capacity(path.len() + 1);
        cycle.push((ei, ej));
        cycle.extend(path.into_iter().rev());

        let mut theta = f64::INFINITY;
        let mut leaving: Option<(usize, usize)> = None;
        for (t, &(i, j)) in cycle.iter().enumerate() {
            if t % 2 == 1 {
                let f = flow[i * n + j];
                if f < theta || (f == theta && leaving.is_none_or(|cur| (i, j) < cur)) {
                    theta = f;
                    leaving = Some((i, j));
                }
            }
        }
        let leaving = leaving.expect("pivot cycle always has a donor cell");

        for (t, &(i, j)) in cycle.iter().enumerate() {
            if t % 2 == 0 {
                flow[i * n + j] += theta;
            } else {
                flow[i * n + j] -= theta;
            }
        }
        flow[leaving.0 * n + leaving.1] = 0.0;
        in_basis[leaving.0 * n + leaving.1] = false;
        in_basis[ei * n + ej] = true;
        let pos = basis
            .iter()
            .position(|&cell| cell == leaving)
            .expect("leaving cell is basic");
        basis[pos] = (ei, ej);
        pivots += 1;
    }

    // Nonbasic cells are exactly zero by construction; clamp any arithmetic
    // dust below zero on the basics.
    for f in flow.iter_mut() {
        if *f < 0.0 {
            *f = 0.0;
        }
    }

    let values = Tensor::from(Array::from_vec(vec![m, n], flow)?);
    Ok(TransportPlan {
        values,
        converged: true,
        iterations: pivots,
    })
}

/// Dual variables over the spanning tree of basic cells, anchored at u_0 = 0.
fn potentials(m: usize, n: usize, basis: &[(usize, usize)], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut row_adj: Vec<Vec<usize>> = vec![Vec::new(); m];
    let mut col_adj: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (idx, &(i, j)) in basis.iter().enumerate() {
        row_adj[i].push(idx);
        col_adj[j].push(idx);
    }
    let mut u = vec![f64::NAN; m];
    let mut v = vec![f64::NAN; n];
    u[0] = 0.0;
    // Frontier of nodes whose potential is known; rows are 0..m, cols m..m+n.
    let mut stack = vec![0usize];
    while let Some(node) = stack.pop() {
        if node < m {
            for &idx in &row_adj[node] {
                let (i, j) = basis[idx];
                if v[j].is_nan() {
                    v[j] = c[i * n + j] - u[i];
                    stack.push(m + j);
                }
            }
        } else {
            let jn = node - m;
            for &idx in &col_adj[jn] {
                let (i, j) = basis[idx];
                if u[i].is_nan() {
                    u[i] = c[i * n + j] - v[j];
                    stack.push(i);
                }
            }
        }
    }
    (u, v)
}

/// Unique path of basic cells from row node `start_row` to column node
/// `target_col` in the basis tree, as the ordered list of traversed cells.
fn tree_path(
    m: usize,
    n: usize,
    basis: &[(usize, usize)],
    start_row: usize,
    target_col: usize,
) -> Vec<(usize, usize)> {
    let total = m + n;
    let mut adj: Vec<Vec<(usize, usize)>> = vec![Vec::new(); total]; // (neighbor, basis idx)
    for (idx, &(i, j)) in basis.iter().enumerate() {
        adj[i].push((m + j, idx));
        adj[m + j].push((i, idx));
    }
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; total]; // (parent node, via basis idx)
    let mut visited = vec![false; total];
    visited[start_row] = true;
    let mut queue = std::collections::VecDeque::from([start_row]);
    let target = m + target_col;
    while let Some(node) = queue.pop_front() {
        if node == target {
            break;
        }
        for &(next, idx) in &adj[node] {
            if !visited[next] {
                visited[next] = true;
                parent[next] = Some((node, idx));
                queue.push_back(next);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = target;
    while let Some((prev, idx)) = parent[node] {
        path.push(basis[idx]);
        node = prev;
    }
    path.reverse();
    path
}

/// Forward value `emd(C) + sinkhorn(C)` with the exact term detached: the
/// backward gradient equals the Sinkhorn-term gradient exactly.
pub fn emd_with_sinkhorn_surrogate(
    cost: &CostMatrix,
    marg: &Marginals,
    cfg: &SinkhornConfig,
) -> Result<TransportPlan, OtError> {
    let exact = emd_exact(&cost.detach(), &marg.detach())?;
    let (soft, _) = sinkhorn(cost, marg, cfg, None)?;
    let values = exact.values.detach().add(&soft.values)?;
    Ok(TransportPlan {
        values,
        converged: soft.converged,
        iterations: soft.iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cost_of(rows: &[&[f64]]) -> CostMatrix {
        CostMatrix::new(Tensor::from(Array::from_rows(rows).unwrap())).unwrap()
    }

    #[test]
    fn identity_preference() {
        let c = cost_of(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let marg = Marginals::all_ones(2);
        let plan = emd_exact(&c, &marg).unwrap();
        assert_eq!(plan.values.data(), &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(plan.total_cost(&c), 0.0);
    }

    #[test]
    fn all_equal_costs_give_a_permutation() {
        let c = cost_of(&[&[1.0, 1.0], &[1.0, 1.0]]);
        let marg = Marginals::all_ones(2);
        let plan = emd_exact(&c, &marg).unwrap();
        let d = plan.values.data();
        let is_id = d == [1.0, 0.0, 0.0, 1.0];
        let is_swap = d == [0.0, 1.0, 1.0, 0.0];
        assert!(is_id || is_swap, "got {d:?}");
    }

    #[test]
    fn zero_mass_is_rejected() {
        let c = cost_of(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let marg = Marginals::new(
            Tensor::from(Array::zeros(vec![2])),
            Tensor::from(Array::zeros(vec![2])),
        )
        .unwrap();
        assert!(matches!(emd_exact(&c, &marg), Err(OtError::ZeroMass)));
    }

    #[test]
    fn vertex_sparsity_rectangular() {
        let c = cost_of(&[
            &[3.0, 1.0, 7.0, 4.0],
            &[2.0, 6.0, 5.0, 9.0],
            &[8.0, 3.0, 3.0, 2.0],
        ]);
        let marg = Marginals::new(
            Tensor::from(Array::from_vec(vec![3], vec![2.0, 3.0, 5.0]).unwrap()),
            Tensor::from(Array::from_vec(vec![4], vec![3.0, 3.0, 2.0, 2.0]).unwrap()),
        )
        .unwrap();
        let plan = emd_exact(&c, &marg).unwrap();
        assert!(plan.nonzeros() <= 3 + 4 - 1);
        assert!(plan.marginal_violation(&marg) <= 1e-9);
    }
}
