//! Low-rank plus diagonal Gaussian covariance algebra.
//!
//! Covariances of the form `sigma2 I + K C K^T` with `K` tall (m x J) and
//! `C` a small SPD core are inverted through the Sherman-Morrison-Woodbury
//! identity, so all factorizations are J x J rather than m x m.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Factorized representation of `sigma2 I + K C K^T`.
pub struct LowRankCov {
    k: DMatrix<f64>,
    sigma2: f64,
    /// Cholesky of the capacitance matrix `C^-1 + K^T K / sigma2`.
    cap_chol: Cholesky<f64, Dyn>,
    logdet: f64,
}

impl LowRankCov {
    /// Build the factorization. `core` must be symmetric positive definite
    /// and `sigma2` strictly positive.
    pub fn new(k: DMatrix<f64>, core: DMatrix<f64>, sigma2: f64) -> Result<Self> {
        let m = k.nrows();
        let j = k.ncols();
        if core.nrows() != j || core.ncols() != j {
            return Err(Error::Validation(format!(
                "core is {}x{}, expected {j}x{j}",
                core.nrows(),
                core.ncols()
            )));
        }
        if !(sigma2 > 0.0) {
            return Err(Error::Validation("sigma2 must be positive".into()));
        }
        let core_chol = core
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Numerical("low-rank core not positive definite".into()))?;
        let logdet_core = 2.0 * (0..j).map(|i| core_chol.l_dirty()[(i, i)].ln()).sum::<f64>();
        let core_inv = core_chol.inverse();
        let cap = core_inv + k.transpose() * &k / sigma2;
        let cap_chol = cap
            .cholesky()
            .ok_or_else(|| Error::Numerical("capacitance matrix not positive definite".into()))?;
        let logdet_cap = 2.0 * (0..j).map(|i| cap_chol.l_dirty()[(i, i)].ln()).sum::<f64>();
        let logdet = m as f64 * sigma2.ln() + logdet_cap + logdet_core;
        Ok(LowRankCov {
            k,
            sigma2,
            cap_chol,
            logdet,
        })
    }

    pub fn dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// `Sigma^-1 rhs` without forming the m x m inverse.
    pub fn solve(&self, rhs: &DVector<f64>) -> DVector<f64> {
        let scaled = rhs / self.sigma2;
        let kt = self.k.transpose() * &scaled;
        let inner = self.cap_chol.solve(&kt);
        &scaled - &self.k * inner / self.sigma2
    }

    /// Gaussian log-density of a residual vector under N(0, Sigma).
    pub fn loglik(&self, resid: &DVector<f64>) -> f64 {
        let m = self.dim() as f64;
        let quad = resid.dot(&self.solve(resid));
        -0.5 * (m * (2.0 * std::f64::consts::PI).ln() + self.logdet + quad)
    }
}
