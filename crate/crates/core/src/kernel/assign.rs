//! Minimum-cost assignment by the Kuhn-Munkres method in its matrix form:
//! reduce rows and columns, star independent zeros, then alternate between
//! priming uncovered zeros, augmenting along star/prime paths and shifting
//! the uncovered minimum until every column holds a starred zero.

/// Solves the square assignment problem on `cost` (`n × n`). Returns
/// `(total, assignment)` with `assignment[row] = column`, and adds the
/// number of matrix cells visited to `ops`.
pub fn min_cost_assignment(cost: &[Vec<f64>], ops: &mut u64) -> (f64, Vec<usize>) {
    let n = cost.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    debug_assert!(cost.iter().all(|r| r.len() == n), "cost matrix must be square");
    let mut c: Vec<Vec<f64>> = cost.to_vec();
    for row in c.iter_mut() {
        *ops += 2 * n as u64;
        let m = row.iter().copied().fold(f64::INFINITY, f64::min);
        row.iter_mut().for_each(|v| *v -= m);
    }
    for j in 0..n {
        *ops += 2 * n as u64;
        let m = (0..n).map(|i| c[i][j]).fold(f64::INFINITY, f64::min);
        (0..n).for_each(|i| c[i][j] -= m);
    }

    let mut star_col: Vec<Option<usize>> = vec![None; n]; // row -> starred column
    let mut star_row: Vec<Option<usize>> = vec![None; n]; // column -> starred row
    let mut prime_col: Vec<Option<usize>> = vec![None; n]; // row -> primed column
    for i in 0..n {
        for j in 0..n {
            *ops += 1;
            if c[i][j] == 0.0 && star_row[j].is_none() {
                star_col[i] = Some(j);
                star_row[j] = Some(i);
                break;
            }
        }
    }

    let mut row_cov = vec![false; n];
    let mut col_cov = vec![false; n];
    loop {
        row_cov.iter_mut().for_each(|r| *r = false);
        prime_col.iter_mut().for_each(|p| *p = None);
        for j in 0..n {
            col_cov[j] = star_row[j].is_some();
        }
        if col_cov.iter().all(|&c| c) {
            break;
        }
        // Prime uncovered zeros until one starts an augmenting path. Uncovered
        // zeros are tracked on a stack: a full scan per phase, one column scan
        // whenever a column is uncovered, and fresh zeros from each shift.
        let mut zeros = Vec::new();
        for i in 0..n {
            for j in 0..n {
                *ops += 1;
                if !col_cov[j] && c[i][j] == 0.0 {
                    zeros.push((i, j));
                }
            }
        }
        let (mut i, mut j) = loop {
            let Some((i, j)) = zeros.pop() else {
                let mut m = f64::INFINITY;
                for i in 0..n {
                    for j in 0..n {
                        *ops += 1;
                        if !row_cov[i] && !col_cov[j] {
                            m = m.min(c[i][j]);
                        }
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        *ops += 1;
                        match (row_cov[i], col_cov[j]) {
                            (true, true) => c[i][j] += m,
                            (false, false) => {
                                c[i][j] -= m;
                                if c[i][j] == 0.0 {
                                    zeros.push((i, j));
                                }
                            }
                            _ => {}
                        }
                    }
                }
                continue;
            };
            if row_cov[i] || col_cov[j] {
                continue;
            }
            prime_col[i] = Some(j);
            match star_col[i] {
                Some(js) => {
                    row_cov[i] = true;
                    col_cov[js] = false;
                    for r in 0..n {
                        *ops += 1;
                        if !row_cov[r] && c[r][js] == 0.0 {
                            zeros.push((r, js));
                        }
                    }
                }
                None => break (i, j),
            }
        };
        // Flip stars and primes along the alternating path.
        loop {
            let next = star_row[j];
            star_col[i] = Some(j);
            star_row[j] = Some(i);
            let Some(r) = next else { break };
            if star_col[r] == Some(j) {
                star_col[r] = None;
            }
            i = r;
            j = prime_col[r].expect("starred row on the path has a prime");
            *ops += 1;
        }
    }

    let assignment: Vec<usize> = star_col.iter().map(|c| c.expect("complete")).collect();
    let total = assignment
        .iter()
        .enumerate()
        .map(|(r, &c)| cost[r][c])
        .sum();
    (total, assignment)
}
