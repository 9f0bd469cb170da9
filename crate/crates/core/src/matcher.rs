//! Minimum-cost bipartite matching with a deterministic tie-break.

use crate::error::{Error, Result};

/// Shortest-augmenting-path assignment on a dense `rows x cols` cost matrix
/// with `rows <= cols`. Returns the column of every row.
fn solve(cost: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    debug_assert!(rows <= cols);
    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut owner = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * cols + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; rows];
    for j in 1..=cols {
        if owner[j] != 0 {
            assign[owner[j] - 1] = j - 1;
        }
    }
    assign
}

fn optimum(cost: &[f64], rows: &[usize], cols: &[usize], width: usize) -> f64 {
    if rows.is_empty() {
        return 0.0;
    }
    let sub: Vec<f64> = rows
        .iter()
        .flat_map(|&r| cols.iter().map(move |&c| cost[r * width + c]))
        .collect();
    let a = solve(&sub, rows.len(), cols.len());
    rows.iter().zip(&a).map(|(&r, &j)| cost[r * width + cols[j]]).sum()
}

/// Matches `n` proposals to `g` targets given a row-major `[n, g]` cost,
/// returning `min(n, g)` `(proposal, target)` pairs sorted by proposal.
///
/// Among optimal assignments the result is the lexicographically smallest
/// when read along the shorter side: its first element takes the smallest
/// partner that still admits an optimum, then the second, and so on.
pub fn hungarian_match(cost: &[f64], n: usize, g: usize) -> Result<Vec<(usize, usize)>> {
    if cost.len() != n * g {
        return Err(Error::dim(format!("cost has {} entries, expected {n}x{g}", cost.len())));
    }
    if let Some(i) = cost.iter().position(|c| !c.is_finite()) {
        return Err(Error::numeric(format!(
            "cost[{}, {}] is {}",
            i / g.max(1),
            i % g.max(1),
            cost[i]
        )));
    }
    if n == 0 || g == 0 {
        return Ok(Vec::new());
    }
    // Orient so that rows form the shorter side.
    let (rows, cols, m) = if n <= g {
        (n, g, cost.to_vec())
    } else {
        let mut t = vec![0.0; n * g];
        for i in 0..n {
            for j in 0..g {
                t[j * n + i] = cost[i * g + j];
            }
        }
        (g, n, t)
    };
    let all_rows: Vec<usize> = (0..rows).collect();
    let all_cols: Vec<usize> = (0..cols).collect();
    let best = optimum(&m, &all_rows, &all_cols, cols);
    let tol = 1e-9 * (1.0 + best.abs());

    let mut free: Vec<usize> = all_cols;
    let mut fixed = 0.0;
    let mut pairs = Vec::with_capacity(rows);
    for r in 0..rows {
        let rest: Vec<usize> = (r + 1..rows).collect();
        let pick = free
            .iter()
            .position(|&c| {
                let others: Vec<usize> = free.iter().copied().filter(|&x| x != c).collect();
                let total = fixed + m[r * cols + c] + optimum(&m, &rest, &others, cols);
                total <= best + tol
            })
            .unwrap_or(0);
        let c = free.remove(pick);
        fixed += m[r * cols + c];
        pairs.push(if n <= g { (r, c) } else { (c, r) });
    }
    pairs.sort_unstable();
    Ok(pairs)
}

/// Sum of `cost` over `pairs`, accumulated in proposal order.
pub fn assignment_cost(cost: &[f64], g: usize, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| cost[i * g + j]).sum()
}
