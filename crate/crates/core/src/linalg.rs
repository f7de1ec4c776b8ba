//! Jittered Cholesky factorization and Gaussian log-densities.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative jitter added before the first factorization attempt.
pub const BASE_JITTER: f64 = 1e-8;
/// Largest relative jitter tried before giving up.
pub const MAX_JITTER: f64 = 1e-4;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Cholesky factor of `M + jitter·I` for a symmetric positive semi-definite `M`.
///
/// The jitter starts at `BASE_JITTER · mean(diag M)` and grows by a factor of
/// ten per failed attempt up to `MAX_JITTER · mean(diag M)`.
#[derive(Debug, Clone)]
pub struct Factor {
    chol: Cholesky<f64, Dyn>,
    jitter: f64,
    log_det: f64,
}

impl Factor {
    pub fn new(m: &DMatrix<f64>) -> Result<Self> {
        let n = m.nrows();
        if n != m.ncols() {
            return Err(Error::Dimension(format!("cannot factor a {}x{} matrix", n, m.ncols())));
        }
        let mean_diag = if n == 0 { 1.0 } else { m.diagonal().mean() };
        let scale = if mean_diag.is_finite() && mean_diag > 0.0 { mean_diag } else { 1.0 };
        let mut rel = BASE_JITTER;
        while rel <= MAX_JITTER * (1.0 + 1e-9) {
            let jitter = rel * scale;
            let mut shifted = m.clone();
            for i in 0..n {
                shifted[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(shifted) {
                let l = chol.l_dirty();
                let log_det = 2.0 * (0..n).map(|i| l[(i, i)].ln()).sum::<f64>();
                if log_det.is_finite() {
                    return Ok(Self { chol, jitter, log_det });
                }
            }
            rel *= 10.0;
        }
        Err(Error::Decomposition { max_jitter: MAX_JITTER * scale })
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// Absolute jitter that was added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `log |M + jitter·I|`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.chol.inverse()
    }

    /// `xᵀ (M + jitter·I)⁻¹ x`.
    pub fn quad_form(&self, x: &DVector<f64>) -> f64 {
        let l = self.chol.l_dirty();
        let n = x.len();
        // forward substitution on the lower triangle only; `l_dirty` leaves
        // garbage above the diagonal
        let mut z = vec![0.0; n];
        let mut acc = 0.0;
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= l[(i, j)] * z[j];
            }
            z[i] = s / l[(i, i)];
            acc += z[i] * z[i];
        }
        acc
    }

    /// `log N(x | 0, M + jitter·I)`.
    pub fn log_normal(&self, x: &DVector<f64>) -> f64 {
        -0.5 * (self.quad_form(x) + self.log_det + x.len() as f64 * LN_2PI)
    }
}

/// `log N(x | mean, var·I)` for an isotropic covariance.
pub fn log_normal_isotropic(x: &DVector<f64>, mean: &DVector<f64>, var: f64) -> f64 {
    let n = x.len() as f64;
    let sq: f64 = x.iter().zip(mean.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    -0.5 * (sq / var + n * var.ln() + n * LN_2PI)
}

/// Half-log of two pi times `n`, the normalizing constant of an `n`-variate normal.
pub fn half_n_ln_2pi(n: usize) -> f64 {
    0.5 * n as f64 * LN_2PI
}
