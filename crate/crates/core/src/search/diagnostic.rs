use nalgebra::DMatrix;

use super::SearchState;

/// Kernel matrix `K` against the cost-similarity matrix `P[i][j] = -|c_i - c_j|`
/// over the observed records, both min-max scaled to `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct KernelDiagnostic {
    pub arch_ids: Vec<u64>,
    pub k: DMatrix<f64>,
    pub p: DMatrix<f64>,
    /// Mean squared difference of the scaled matrices.
    pub mse: f64,
}

/// Affine map of the entries onto `[-1, 1]`; a constant matrix maps to 1.
pub fn normalize_unit(m: &DMatrix<f64>) -> DMatrix<f64> {
    let lo = m.min();
    let hi = m.max();
    if hi - lo <= 0.0 {
        return DMatrix::from_element(m.nrows(), m.ncols(), 1.0);
    }
    m.map(|x| 2.0 * (x - lo) / (hi - lo) - 1.0)
}

/// One row per line, comma separated, full precision.
pub fn matrix_csv(m: &DMatrix<f64>) -> String {
    let mut out = String::new();
    for row in m.row_iter() {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out += &cells.join(",");
        out.push('\n');
    }
    out
}

pub fn kernel_diagnostic(state: &SearchState) -> KernelDiagnostic {
    let observed = state.observed(state.history().len());
    let costs: Vec<f64> = observed.iter().map(|r| r.cost.expect("observed")).collect();
    let n = costs.len();
    let k = normalize_unit(&state.distance().kernel_matrix());
    let p = normalize_unit(&DMatrix::from_fn(n, n, |i, j| -(costs[i] - costs[j]).abs()));
    let mse = if n == 0 {
        0.0
    } else {
        (&k - &p).map(|x| x * x).sum() / (n * n) as f64
    };
    KernelDiagnostic {
        arch_ids: observed.iter().map(|r| r.arch_id).collect(),
        k,
        p,
        mse,
    }
}
