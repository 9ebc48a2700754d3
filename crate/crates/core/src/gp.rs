//! Gaussian-process regression on a precomputed kernel matrix.
//!
//! Targets are standardized before fitting; predictions are returned in the
//! original units. The kernel has unit self-similarity, so the prior variance
//! in standardized units is 1.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

/// Observation noise variance in standardized units.
pub const DEFAULT_NOISE: f64 = 1e-4;
const JITTER_START: f64 = 1e-8;
const JITTER_MAX: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GpError {
    #[error("cannot fit a model without observations")]
    Empty,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("non-finite value in kernel or targets")]
    NotFinite,
    #[error("cholesky factorization failed even with jitter {0:e}")]
    Factorization(f64),
}

#[derive(Debug, Clone)]
pub struct GpModel {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    y_mean: f64,
    y_std: f64,
    noise: f64,
    jitter: f64,
}

/// Fits on kernel matrix `k` (n × n) and costs `y`.
pub fn fit(k: &DMatrix<f64>, y: &[f64], noise: f64) -> Result<GpModel, GpError> {
    let n = y.len();
    if n == 0 {
        return Err(GpError::Empty);
    }
    if k.nrows() != n || k.ncols() != n {
        return Err(GpError::Dimension {
            expected: n,
            got: k.nrows(),
        });
    }
    if k.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(GpError::NotFinite);
    }
    let y_mean = y.iter().sum::<f64>() / n as f64;
    let var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / n as f64;
    let y_std = if var > 0.0 { var.sqrt() } else { 1.0 };
    let ys = DVector::from_iterator(n, y.iter().map(|v| (v - y_mean) / y_std));

    let base = k + DMatrix::identity(n, n) * noise;
    let mut jitter = 0.0;
    let chol = loop {
        let a = &base + DMatrix::identity(n, n) * jitter;
        if let Some(c) = Cholesky::new(a) {
            break c;
        }
        jitter = if jitter == 0.0 { JITTER_START } else { jitter * 10.0 };
        if jitter > JITTER_MAX * 1.000_001 {
            return Err(GpError::Factorization(JITTER_MAX));
        }
    };
    let alpha = chol.solve(&ys);
    Ok(GpModel {
        chol,
        alpha,
        y_mean,
        y_std,
        noise,
        jitter,
    })
}

impl GpModel {
    pub fn len(&self) -> usize {
        self.alpha.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alpha.is_empty()
    }

    /// Diagonal term actually added to the kernel: noise plus any jitter.
    pub fn diagonal_term(&self) -> f64 {
        self.noise + self.jitter
    }

    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    pub fn y_std(&self) -> f64 {
        self.y_std
    }

    pub fn cholesky_factor(&self) -> DMatrix<f64> {
        self.chol.l()
    }

    /// Posterior mean and standard deviation at a point with cross-kernel
    /// `k_star` and self-kernel `k_ss`, in cost units.
    pub fn predict(&self, k_star: &DVector<f64>, k_ss: f64) -> Result<(f64, f64), GpError> {
        if k_star.len() != self.len() {
            return Err(GpError::Dimension {
                expected: self.len(),
                got: k_star.len(),
            });
        }
        let mu = k_star.dot(&self.alpha);
        let v = self
            .chol
            .l_dirty()
            .solve_lower_triangular(k_star)
            .expect("cholesky factor is invertible");
        let var = (k_ss - v.dot(&v)).max(0.0);
        Ok((mu * self.y_std + self.y_mean, var.sqrt() * self.y_std))
    }
}
