//! Minimum-cost assignment (Kuhn–Munkres with potentials, O(n³)).

/// Solves the square assignment problem for `cost` (`n × n`, row-major) and
/// returns `col_of_row`.
fn solve_square(cost: &[f64], n: usize) -> Vec<usize> {
    // 1-based potentials formulation; column 0 is a sentinel.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
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
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=n {
        if p[j] > 0 {
            col_of_row[p[j] - 1] = j - 1;
        }
    }
    col_of_row
}

/// One-to-one matching between `rows` and `cols` items using only pairs with
/// `allowed(i, j)`: maximizes the number of pairs, then minimizes their total
/// cost. Returns `(row, col)` pairs sorted by row.
pub fn assign(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64, allowed: impl Fn(usize, usize) -> bool) -> Vec<(usize, usize)> {
    let n = rows.max(cols);
    if rows == 0 || cols == 0 {
        return Vec::new();
    }
    let mut max_cost = 0.0f64;
    let mut m = vec![f64::NAN; n * n];
    for i in 0..rows {
        for j in 0..cols {
            if allowed(i, j) {
                let c = cost(i, j);
                max_cost = max_cost.max(c.abs());
                m[i * n + j] = c;
            }
        }
    }
    // A forbidden (or padding) cell costs more than any full set of allowed
    // pairs, so one extra real pair always beats any cost saving.
    let big = (n as f64 + 1.0) * (max_cost + 1.0);
    for c in &mut m {
        if c.is_nan() {
            *c = big;
        }
    }
    solve_square(&m, n)
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < rows && j < cols && allowed(i, j))
        .collect()
}
