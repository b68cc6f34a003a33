use super::types::CostMatrix;
use super::OtError;

/// Minimum-cost row-to-column assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    /// Column assigned to each row; columns are distinct.
    pub cols: Vec<usize>,
    pub total_cost: f64,
}

/// Solves the linear assignment problem by shortest augmenting paths with
/// dual potentials (O(m^2 n)). Requires `m <= n`; every row receives a
/// distinct column. Ties break toward the lowest column index.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment, OtError> {
    let (m, n) = (cost.rows(), cost.cols());
    if m > n {
        return Err(OtError::TooManyRows { m, n });
    }
    let c = cost.tensor().data();

    // One-based internally: p[j] is the row matched to column j (0 = free).
    let mut u = vec![0.0f64; m + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Augment along the found path.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut cols = vec![usize::MAX; m];
    for j in 1..=n {
        if p[j] != 0 {
            cols[p[j] - 1] = j - 1;
        }
    }
    let total_cost = cols
        .iter()
        .enumerate()
        .map(|(i, &j)| c[i * n + j])
        .sum();
    Ok(Assignment { cols, total_cost })
}
