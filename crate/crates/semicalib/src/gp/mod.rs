//! One-dimensional Gaussian-process emulators over input space, one per
//! principal-component score.
//!
//! Covariance is nugget + separable exponential,
//! `zeta 1[theta=theta'] + kappa exp(-sum_b |theta_b - theta'_b| / phi_b)`.
//! LPC-score emulators use a zero mean and maximum likelihood; PC-score
//! emulators use a natural-spline mean in the LPC scores fitted by REML,
//! with the spline degrees of freedom chosen by k-fold cross-validation.

pub mod optim;
pub mod spline;

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::data::DesignMatrix;
use crate::error::{Error, Result};
use spline::SplineBasis;

/// Relative width of the log partial-sill box around the score variance.
/// The lower side is wide enough that a perfect mean fit can drive the
/// residual process variance below 1e-6 of the signal variance.
const LOG_KAPPA_BOX: (f64, f64) = (-16.0, 10.0);
const LOG_PHI_BOX: (f64, f64) = (-4.605170185988091, 2.302585092994046); // ln 0.01 .. ln 10
const LOG_ZETA_BOX: (f64, f64) = (-12.0, 5.0);
const N_STARTS: usize = 8;
const CV_STARTS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ExpCovParams {
    pub zeta: f64,
    pub kappa: f64,
    pub phi: Vec<f64>,
}

impl ExpCovParams {
    pub fn from_log(log_params: &[f64]) -> Self {
        ExpCovParams {
            zeta: log_params[0].exp(),
            kappa: log_params[1].exp(),
            phi: log_params[2..].iter().map(|v| v.exp()).collect(),
        }
    }

    pub fn to_log(&self) -> Vec<f64> {
        let mut v = vec![self.zeta.ln(), self.kappa.ln()];
        v.extend(self.phi.iter().map(|p| p.ln()));
        v
    }
}

/// Nugget + separable exponential covariance between two input settings.
pub fn cov_exp(a: &[f64], b: &[f64], params: &ExpCovParams) -> f64 {
    let mut dist = 0.0;
    let mut equal = true;
    for ((x, y), phi) in a.iter().zip(b.iter()).zip(params.phi.iter()) {
        if x != y {
            equal = false;
        }
        dist += (x - y).abs() / phi;
    }
    let nug = if equal { params.zeta } else { 0.0 };
    nug + params.kappa * (-dist).exp()
}

/// Exponential correlation matrix (no nugget, no sill) and the per-input
/// absolute-distance matrices used by the gradients.
fn corr_and_dists(design: &DMatrix<f64>, phi: &[f64]) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
    let n = design.nrows();
    let d = design.ncols();
    let mut dists: Vec<DMatrix<f64>> = (0..d).map(|_| DMatrix::zeros(n, n)).collect();
    let mut corr = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let mut s = 0.0;
            for b in 0..d {
                let diff = (design[(i, b)] - design[(j, b)]).abs();
                dists[b][(i, j)] = diff;
                s += diff / phi[b];
            }
            corr[(i, j)] = (-s).exp();
        }
    }
    (corr, dists)
}

fn cov_matrix(corr: &DMatrix<f64>, zeta: f64, kappa: f64) -> DMatrix<f64> {
    let n = corr.nrows();
    let mut sigma = corr * kappa;
    for i in 0..n {
        sigma[(i, i)] += zeta;
    }
    sigma
}

/// Negative Gaussian log-likelihood under a zero mean, with its gradient
/// in log-parameter space `[ln zeta, ln kappa, ln phi_1..d]`. None when the
/// covariance is not positive definite.
pub fn neg_loglik_zero_mean(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    log_params: &[f64],
) -> Option<(f64, DVector<f64>)> {
    let params = ExpCovParams::from_log(log_params);
    let n = design.nrows();
    let d = design.ncols();
    let (corr, dists) = corr_and_dists(design, &params.phi);
    let sigma = cov_matrix(&corr, params.zeta, params.kappa);
    let chol = sigma.cholesky()?;
    let logdet = 2.0 * (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>();
    let alpha = chol.solve(y);
    let nll = 0.5 * (n as f64 * (2.0 * PI).ln() + logdet + y.dot(&alpha));
    if !nll.is_finite() {
        return None;
    }
    let sigma_inv = chol.inverse();
    let mut grad = DVector::zeros(2 + d);
    // d/dp of 1/2(logdet + quad): 1/2 tr(Sinv dS) - 1/2 a' dS a
    let dir_term = |ds: &DMatrix<f64>| {
        let tr = sigma_inv.dot(ds); // tr(Sinv dS) for symmetric dS
        let quad = (ds * &alpha).dot(&alpha);
        0.5 * (tr - quad)
    };
    let mut eye_z = DMatrix::zeros(n, n);
    for i in 0..n {
        eye_z[(i, i)] = params.zeta;
    }
    grad[0] = dir_term(&eye_z);
    grad[1] = dir_term(&(&corr * params.kappa));
    for b in 0..d {
        let ds = corr.component_mul(&dists[b]) * (params.kappa / params.phi[b]);
        grad[2 + b] = dir_term(&ds);
    }
    Some((nll, grad))
}

/// Negative restricted log-likelihood with the mean coefficients profiled
/// out, plus its gradient in log-parameter space.
pub fn neg_restricted_loglik(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    log_params: &[f64],
) -> Option<(f64, DVector<f64>)> {
    let params = ExpCovParams::from_log(log_params);
    let n = design.nrows();
    let d = design.ncols();
    let q = x.ncols();
    let (corr, dists) = corr_and_dists(design, &params.phi);
    let sigma = cov_matrix(&corr, params.zeta, params.kappa);
    let chol = sigma.cholesky()?;
    let logdet = 2.0 * (0..n).map(|i| chol.l_dirty()[(i, i)].ln()).sum::<f64>();
    let sigma_inv = chol.inverse();
    let a = &sigma_inv * x; // Sigma^-1 X
    let gram = x.transpose() * &a;
    let gram_chol = gram.cholesky()?;
    let logdet_gram = 2.0 * (0..q).map(|i| gram_chol.l_dirty()[(i, i)].ln()).sum::<f64>();
    // P = Sigma^-1 - A Gram^-1 A^T
    let ginv_at = gram_chol.solve(&a.transpose());
    let p_mat = &sigma_inv - &a * &ginv_at;
    let py = &p_mat * y;
    let nll = 0.5 * ((n - q) as f64 * (2.0 * PI).ln() + logdet + logdet_gram + y.dot(&py));
    if !nll.is_finite() {
        return None;
    }
    let mut grad = DVector::zeros(2 + d);
    let dir_term = |ds: &DMatrix<f64>| {
        let tr = p_mat.dot(ds);
        let quad = (ds * &py).dot(&py);
        0.5 * (tr - quad)
    };
    let mut eye_z = DMatrix::zeros(n, n);
    for i in 0..n {
        eye_z[(i, i)] = params.zeta;
    }
    grad[0] = dir_term(&eye_z);
    grad[1] = dir_term(&(&corr * params.kappa));
    for b in 0..d {
        let ds = corr.component_mul(&dists[b]) * (params.kappa / params.phi[b]);
        grad[2 + b] = dir_term(&ds);
    }
    Some((nll, grad))
}

#[derive(Debug, Clone)]
pub enum MeanSpec {
    Zero,
    Spline {
        /// One basis per LPC-score component.
        bases: Vec<SplineBasis>,
        /// Intercept followed by the per-component blocks.
        beta: DVector<f64>,
        dof: usize,
    },
}

impl MeanSpec {
    /// Mean-function design row at the given LPC scores.
    fn row(&self, w_scores: &[f64]) -> Option<DVector<f64>> {
        match self {
            MeanSpec::Zero => Some(DVector::zeros(0)),
            MeanSpec::Spline { bases, .. } => {
                if w_scores.len() != bases.len() {
                    return None;
                }
                let mut row = vec![1.0];
                for (b, &w) in bases.iter().zip(w_scores.iter()) {
                    row.extend(b.eval(w));
                }
                Some(DVector::from_vec(row))
            }
        }
    }

    fn value(&self, w_scores: Option<&[f64]>) -> Result<f64> {
        match self {
            MeanSpec::Zero => Ok(0.0),
            MeanSpec::Spline { beta, .. } => {
                let w = w_scores.ok_or_else(|| {
                    Error::Validation("spline-mean emulator needs LPC scores at theta".into())
                })?;
                let row = self.row(w).ok_or_else(|| {
                    Error::Validation("LPC score vector has wrong length".into())
                })?;
                Ok(row.dot(beta))
            }
        }
    }
}

/// A fitted one-dimensional GP over input space.
#[derive(Debug, Clone)]
pub struct ScoreEmulator {
    pub design: DMatrix<f64>,
    pub targets: DVector<f64>,
    pub mean: MeanSpec,
    pub cov: ExpCovParams,
    /// Training LPC scores (canonical row order); present for spline means.
    pub w_train: Option<DMatrix<f64>>,
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
}

/// Canonical (lexicographic by design row) ordering, so fits are exactly
/// invariant to the order training data arrive in.
fn canonical_order(design: &DMatrix<f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..design.nrows()).collect();
    idx.sort_by(|&a, &b| {
        for c in 0..design.ncols() {
            match design[(a, c)].partial_cmp(&design[(b, c)]).unwrap() {
                std::cmp::Ordering::Equal => continue,
                other => return other,
            }
        }
        std::cmp::Ordering::Equal
    });
    idx
}

fn reorder(design: &DMatrix<f64>, y: &[f64], order: &[usize]) -> (DMatrix<f64>, DVector<f64>) {
    let d = design.ncols();
    let nd = DMatrix::from_fn(order.len(), d, |i, c| design[(order[i], c)]);
    let ny = DVector::from_fn(order.len(), |i, _| y[order[i]]);
    (nd, ny)
}

impl ScoreEmulator {
    /// Assemble an emulator from explicit parameters (recomputes the
    /// training factorization). Training rows are used as given.
    pub fn assemble(
        design: DMatrix<f64>,
        targets: DVector<f64>,
        mean: MeanSpec,
        cov: ExpCovParams,
        w_train: Option<&DMatrix<f64>>,
    ) -> Result<Self> {
        let (corr, _) = corr_and_dists(&design, &cov.phi);
        let sigma = cov_matrix(&corr, cov.zeta, cov.kappa);
        let chol = sigma
            .cholesky()
            .ok_or_else(|| Error::fit("gp", "training covariance not positive definite"))?;
        let resid = match &mean {
            MeanSpec::Zero => targets.clone(),
            MeanSpec::Spline { .. } => {
                let w = w_train.ok_or_else(|| {
                    Error::Validation("spline-mean emulator needs training LPC scores".into())
                })?;
                let mut r = targets.clone();
                for i in 0..targets.len() {
                    let ws: Vec<f64> = w.row(i).iter().cloned().collect();
                    r[i] -= mean.value(Some(&ws))?;
                }
                r
            }
        };
        let alpha = chol.solve(&resid);
        let w_train = match &mean {
            MeanSpec::Zero => None,
            MeanSpec::Spline { .. } => w_train.cloned(),
        };
        Ok(ScoreEmulator {
            design,
            targets,
            mean,
            cov,
            w_train,
            chol,
            alpha,
        })
    }

    pub fn n_train(&self) -> usize {
        self.design.nrows()
    }

    /// GP conditional mean and variance at an input setting. Spline-mean
    /// emulators need the (predicted) LPC scores at theta.
    pub fn predict(&self, theta: &[f64], w_at_theta: Option<&[f64]>) -> Result<(f64, f64)> {
        self.predict_with_sill(theta, w_at_theta, self.cov.kappa)
    }

    /// Prediction with the partial sill re-scaled: conditional variance is
    /// multiplied by `kappa_new / kappa_hat`, the mean is unchanged.
    pub fn predict_with_sill(
        &self,
        theta: &[f64],
        w_at_theta: Option<&[f64]>,
        kappa_new: f64,
    ) -> Result<(f64, f64)> {
        if kappa_new <= 0.0 {
            return Err(Error::Validation("kappa_new must be positive".into()));
        }
        let n = self.n_train();
        let mut k = DVector::zeros(n);
        for i in 0..n {
            let row: Vec<f64> = self.design.row(i).iter().cloned().collect();
            k[i] = cov_exp(theta, &row, &self.cov);
        }
        let mean = self.mean.value(w_at_theta)? + k.dot(&self.alpha);
        let sol = self.chol.solve(&k);
        let var = (self.cov.kappa - k.dot(&sol)).max(0.0);
        Ok((mean, var * kappa_new / self.cov.kappa))
    }
}

fn score_variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

fn param_box(d: usize, var: f64) -> (Vec<f64>, Vec<f64>) {
    let lv = var.max(1e-300).ln();
    let mut lo = vec![LOG_ZETA_BOX.0, lv + LOG_KAPPA_BOX.0];
    let mut hi = vec![LOG_ZETA_BOX.1, lv + LOG_KAPPA_BOX.1];
    for _ in 0..d {
        lo.push(LOG_PHI_BOX.0);
        hi.push(LOG_PHI_BOX.1);
    }
    (lo, hi)
}

fn multi_start_fit(
    f: optim::GradFn,
    lo: &[f64],
    hi: &[f64],
    n_starts: usize,
) -> Option<(DVector<f64>, f64)> {
    let mut best: Option<(DVector<f64>, f64)> = None;
    for x0 in optim::start_points(n_starts, lo, hi) {
        if let Some((x, fx)) = optim::minimize_bfgs(f, &x0, lo, hi, 200) {
            if fx.is_finite() && best.as_ref().map_or(true, |(_, b)| fx < *b) {
                best = Some((x, fx));
            }
        }
    }
    best
}

/// Degenerate all-constant scores get a clamped near-zero process instead
/// of a fit failure.
fn degenerate_emulator(design: DMatrix<f64>, y: DVector<f64>, d: usize) -> Result<ScoreEmulator> {
    let var = score_variance(y.as_slice());
    eprintln!("warning: near-constant scores; clamping partial sill");
    let cov = ExpCovParams {
        zeta: 1e-12,
        kappa: 1e-12 * var.max(1.0),
        phi: vec![0.5; d],
    };
    ScoreEmulator::assemble(design, y, MeanSpec::Zero, cov, None)
}

/// Zero-mean MLE fit (used for LPC scores and the projection response).
pub fn fit_mle_zero_mean(design: &DesignMatrix, scores: &[f64]) -> Result<ScoreEmulator> {
    let n = design.n_runs();
    let d = design.dim();
    if scores.len() != n {
        return Err(Error::Validation("scores length must match design".into()));
    }
    if n < d + 2 {
        return Err(Error::Validation(format!(
            "need at least d+2={} runs, got {n}",
            d + 2
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("scores must be finite".into()));
    }
    let order = canonical_order(design.rows());
    let (dm, y) = reorder(design.rows(), scores, &order);
    let var = score_variance(y.as_slice());
    if var < 1e-15 * y.as_slice().iter().map(|v| v * v).sum::<f64>().max(1.0) {
        return degenerate_emulator(dm, y, d);
    }
    let (lo, hi) = param_box(d, var);
    let obj = |lp: &DVector<f64>| neg_loglik_zero_mean(&dm, &y, lp.as_slice());
    let (xbest, _) = multi_start_fit(&obj, &lo, &hi, N_STARTS)
        .ok_or_else(|| Error::fit("gp-mle", "likelihood non-finite at all starts"))?;
    let cov = ExpCovParams::from_log(xbest.as_slice());
    ScoreEmulator::assemble(dm, y, MeanSpec::Zero, cov, None)
}

fn build_x(w: &DMatrix<f64>, bases: &[SplineBasis]) -> DMatrix<f64> {
    let n = w.nrows();
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = vec![1.0];
            for (b, basis) in bases.iter().enumerate() {
                row.extend(basis.eval(w[(i, b)]));
            }
            row
        })
        .collect();
    let q = rows[0].len();
    DMatrix::from_fn(n, q, |i, j| rows[i][j])
}

fn reml_beta(
    dm: &DMatrix<f64>,
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    cov: &ExpCovParams,
) -> Result<DVector<f64>> {
    let (corr, _) = corr_and_dists(dm, &cov.phi);
    let sigma = cov_matrix(&corr, cov.zeta, cov.kappa);
    let chol = sigma
        .cholesky()
        .ok_or_else(|| Error::fit("gp-reml", "covariance not positive definite"))?;
    let a = chol.solve(x);
    let gram = x.transpose() * &a;
    let gram_chol = gram
        .cholesky()
        .ok_or_else(|| Error::fit("gp-reml", "singular spline basis (duplicated scores)"))?;
    Ok(gram_chol.solve(&(a.transpose() * y)))
}

fn fit_reml_once(
    dm: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DMatrix<f64>,
    bases: &[SplineBasis],
    n_starts: usize,
) -> Result<(ExpCovParams, DVector<f64>)> {
    let d = dm.ncols();
    let x = build_x(w, bases);
    if x.ncols() >= dm.nrows() {
        return Err(Error::fit(
            "gp-reml",
            "spline basis has as many columns as training runs",
        ));
    }
    // guard against a rank-deficient mean basis before optimizing
    let xtx = x.transpose() * &x;
    if xtx.cholesky().is_none() {
        return Err(Error::fit("gp-reml", "singular spline basis (duplicated scores)"));
    }
    let var = score_variance(y.as_slice());
    let (lo, hi) = param_box(d, var.max(1e-12));
    let obj = |lp: &DVector<f64>| neg_restricted_loglik(dm, y, &x, lp.as_slice());
    let (xbest, _) = multi_start_fit(&obj, &lo, &hi, n_starts)
        .ok_or_else(|| Error::fit("gp-reml", "restricted likelihood non-finite at all starts"))?;
    let cov = ExpCovParams::from_log(xbest.as_slice());
    let beta = reml_beta(dm, y, &x, &cov)?;
    Ok((cov, beta))
}

/// Spline-mean REML fit with the spline degrees of freedom selected by
/// k-fold cross-validated predictive RMSE (same dof for every LPC
/// component; ties go to the smaller dof).
pub fn fit_reml_spline_mean(
    design: &DesignMatrix,
    scores: &[f64],
    w_scores: &DMatrix<f64>,
    dof_grid: &[usize],
    folds: usize,
) -> Result<ScoreEmulator> {
    let n = design.n_runs();
    let d = design.dim();
    if scores.len() != n || w_scores.nrows() != n {
        return Err(Error::Validation("scores/w_scores length mismatch".into()));
    }
    if dof_grid.is_empty() {
        return Err(Error::Validation("dof grid must be nonempty".into()));
    }
    if n < d + 2 {
        return Err(Error::Validation(format!(
            "need at least d+2={} runs, got {n}",
            d + 2
        )));
    }
    let order = canonical_order(design.rows());
    let (dm, y) = reorder(design.rows(), scores, &order);
    let j_w = w_scores.ncols();
    let w = DMatrix::from_fn(n, j_w, |i, c| w_scores[(order[i], c)]);

    let var = score_variance(y.as_slice());
    if var < 1e-15 * y.as_slice().iter().map(|v| v * v).sum::<f64>().max(1.0) {
        return degenerate_emulator(dm, y, d);
    }

    // knots from the full training values, shared across folds
    let make_bases = |dof: usize| -> Result<Vec<SplineBasis>> {
        (0..j_w)
            .map(|k| {
                let col: Vec<f64> = (0..n).map(|i| w[(i, k)]).collect();
                SplineBasis::from_values(&col, dof)
            })
            .collect()
    };

    let folds = folds.max(2).min(n);
    let mut best: Option<(usize, f64)> = None;
    for &dof in dof_grid {
        let bases = match make_bases(dof) {
            Ok(b) => b,
            Err(_) => continue,
        };
        let mut sse = 0.0;
        let mut cnt = 0usize;
        // folds that fail (e.g. a training subset with tied scores making
        // the mean basis singular) are skipped rather than disqualifying
        // the dof candidate
        for fold in 0..folds {
            let test: Vec<usize> = (0..n).filter(|i| i % folds == fold).collect();
            let train: Vec<usize> = (0..n).filter(|i| i % folds != fold).collect();
            if train.len() <= 1 + j_w * dof + 1 {
                continue;
            }
            let tdm = DMatrix::from_fn(train.len(), d, |i, c| dm[(train[i], c)]);
            let ty = DVector::from_fn(train.len(), |i, _| y[train[i]]);
            let tw = DMatrix::from_fn(train.len(), j_w, |i, c| w[(train[i], c)]);
            let (cov, beta) = match fit_reml_once(&tdm, &ty, &tw, &bases, CV_STARTS) {
                Ok(x) => x,
                Err(_) => continue,
            };
            let mean = MeanSpec::Spline {
                bases: bases.clone(),
                beta,
                dof,
            };
            let em = match ScoreEmulator::assemble(tdm, ty, mean, cov, Some(&tw)) {
                Ok(e) => e,
                Err(_) => continue,
            };
            for &i in &test {
                let theta: Vec<f64> = dm.row(i).iter().cloned().collect();
                let ws: Vec<f64> = w.row(i).iter().cloned().collect();
                if let Ok((m, _)) = em.predict(&theta, Some(&ws)) {
                    sse += (m - y[i]).powi(2);
                    cnt += 1;
                }
            }
        }
        if cnt == 0 {
            continue;
        }
        let rmse = (sse / cnt as f64).sqrt();
        if best.map_or(true, |(_, b)| rmse < b - 1e-12 * (1.0 + b)) {
            best = Some((dof, rmse));
        }
    }
    let (dof, _) = best.ok_or_else(|| Error::fit("gp-reml", "no dof candidate fit succeeded"))?;
    let bases = make_bases(dof)?;
    let (cov, beta) = fit_reml_once(&dm, &y, &w, &bases, N_STARTS)?;
    let mean = MeanSpec::Spline { bases, beta, dof };
    ScoreEmulator::assemble(dm, y, mean, cov, Some(&w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn design_1d(n: usize) -> DesignMatrix {
        let rows = DMatrix::from_fn(n, 1, |i, _| i as f64 / (n - 1) as f64);
        DesignMatrix::from_rows(rows).unwrap()
    }

    fn sample_gp(design: &DMatrix<f64>, params: &ExpCovParams, seed: u64) -> DVector<f64> {
        let n = design.nrows();
        let (corr, _) = corr_and_dists(design, &params.phi);
        let sigma = cov_matrix(&corr, params.zeta, params.kappa);
        let chol = sigma.cholesky().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DVector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        chol.l() * z
    }

    #[test]
    fn cov_exp_examples() {
        let p = ExpCovParams {
            zeta: 0.3,
            kappa: 2.0,
            phi: vec![0.5],
        };
        assert_relative_eq!(cov_exp(&[0.2], &[0.2], &p), 2.3);
        // |d| = phi gives kappa e^-1 without nugget
        assert_relative_eq!(
            cov_exp(&[0.0], &[0.5], &p),
            2.0 * (-1.0f64).exp(),
            max_relative = 1e-15
        );
        // random pair, d=4, vs scalar formula
        let p4 = ExpCovParams {
            zeta: 0.1,
            kappa: 1.7,
            phi: vec![0.3, 0.9, 0.2, 1.4],
        };
        let a: [f64; 4] = [0.1, 0.4, 0.8, 0.3];
        let b = [0.9, 0.2, 0.35, 0.6];
        let mut s = 0.0;
        for i in 0..4 {
            s += (a[i] - b[i]).abs() / p4.phi[i];
        }
        assert_relative_eq!(cov_exp(&a, &b, &p4), 1.7 * (-s).exp(), max_relative = 1e-15);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let n = 20;
        let d = 2;
        let dm = DMatrix::from_fn(n, d, |_, _| rng.gen::<f64>());
        let y = DVector::from_fn(n, |_, _| {
            let v: f64 = StandardNormal.sample(&mut rng);
            v
        });
        let x = DMatrix::from_fn(n, 2, |i, c| if c == 0 { 1.0 } else { dm[(i, 0)] });
        for trial in 0..10 {
            let lp = DVector::from_fn(2 + d, |k, _| {
                -2.0 + 2.0 * optim::halton(trial * 7 + k + 1, k)
            });
            for reml in [false, true] {
                let f = |v: &DVector<f64>| {
                    if reml {
                        neg_restricted_loglik(&dm, &y, &x, v.as_slice())
                    } else {
                        neg_loglik_zero_mean(&dm, &y, v.as_slice())
                    }
                };
                let (_, g) = f(&lp).unwrap();
                for k in 0..(2 + d) {
                    let h = 1e-5;
                    let mut up = lp.clone();
                    up[k] += h;
                    let mut dn = lp.clone();
                    dn[k] -= h;
                    let fd = (f(&up).unwrap().0 - f(&dn).unwrap().0) / (2.0 * h);
                    let denom = fd.abs().max(g[k].abs()).max(1e-8);
                    assert!(
                        ((g[k] - fd) / denom).abs() < 1e-5,
                        "reml={reml} trial={trial} k={k}: analytic {} fd {fd}",
                        g[k]
                    );
                }
            }
        }
    }

    #[test]
    fn mle_recovers_parameters_within_grid_cell() {
        let n = 100;
        let design = design_1d(n);
        let truth = ExpCovParams {
            zeta: 0.01,
            kappa: 1.0,
            phi: vec![0.3],
        };
        let y = sample_gp(design.rows(), &truth, 99);
        let em = fit_mle_zero_mean(&design, y.as_slice()).unwrap();
        // 20^3 log-grid oracle
        let (lo, hi) = param_box(1, score_variance(y.as_slice()));
        let lo = [lo[0].max(-8.0), lo[1].max(-4.0), lo[2]];
        let hi = [hi[0].min(2.0), hi[1].min(4.0), hi[2]];
        let mut best = (f64::INFINITY, [0.0f64; 3]);
        let steps = 20;
        for a in 0..steps {
            for b in 0..steps {
                for c in 0..steps {
                    let lp = DVector::from_column_slice(&[
                        lo[0] + (hi[0] - lo[0]) * a as f64 / (steps - 1) as f64,
                        lo[1] + (hi[1] - lo[1]) * b as f64 / (steps - 1) as f64,
                        lo[2] + (hi[2] - lo[2]) * c as f64 / (steps - 1) as f64,
                    ]);
                    if let Some((v, _)) = neg_loglik_zero_mean(design.rows(), &y, lp.as_slice()) {
                        if v < best.0 {
                            best = (v, [lp[0], lp[1], lp[2]]);
                        }
                    }
                }
            }
        }
        let fit_lp = em.cov.to_log();
        let (fit_val, _) = neg_loglik_zero_mean(design.rows(), &y, &fit_lp).unwrap();
        assert!(fit_val <= best.0 + 1e-6, "fit {fit_val} vs grid {}", best.0);
        for k in 0..3 {
            let cell = (hi[k] - lo[k]) / (steps - 1) as f64;
            assert!(
                (fit_lp[k] - best.1[k]).abs() <= cell + 1e-9,
                "param {k}: fit {} grid {}",
                fit_lp[k],
                best.1[k]
            );
        }
    }

    #[test]
    fn all_zero_scores_predict_zero() {
        let design = design_1d(10);
        let em = fit_mle_zero_mean(&design, &[0.0; 10]).unwrap();
        let (m, _) = em.predict(&[0.37], None).unwrap();
        assert_relative_eq!(m, 0.0, epsilon = 1e-10);
        assert!(em.cov.kappa <= 1e-10);
    }

    #[test]
    fn interpolation_with_zero_nugget() {
        let design = design_1d(5);
        let y = DVector::from_column_slice(&[1.0, -0.5, 2.0, 0.3, -1.2]);
        let cov = ExpCovParams {
            zeta: 0.0,
            kappa: 1.5,
            phi: vec![0.4],
        };
        let em =
            ScoreEmulator::assemble(design.rows().clone(), y.clone(), MeanSpec::Zero, cov, None)
                .unwrap();
        for i in 0..5 {
            let theta = [design.rows()[(i, 0)]];
            let (m, v) = em.predict(&theta, None).unwrap();
            assert_relative_eq!(m, y[i], epsilon = 1e-8);
            assert!(v.abs() < 1e-8, "variance {v}");
        }
        // decorrelation limit: far away, mean -> 0, var -> kappa
        let (m, v) = em.predict(&[500.0], None).unwrap();
        assert!(m.abs() < 1e-6);
        assert_relative_eq!(v, 1.5, epsilon = 1e-6);
    }

    #[test]
    fn predict_matches_kriging_oracle() {
        let design = design_1d(5);
        let y = DVector::from_column_slice(&[0.3, 1.1, -0.4, 0.9, 2.0]);
        let cov = ExpCovParams {
            zeta: 0.05,
            kappa: 0.8,
            phi: vec![0.25],
        };
        let em =
            ScoreEmulator::assemble(design.rows().clone(), y.clone(), MeanSpec::Zero, cov.clone(), None)
                .unwrap();
        let theta = [0.41];
        let (m, v) = em.predict(&theta, None).unwrap();
        // direct solve oracle
        let n = 5;
        let mut sigma = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                sigma[(i, j)] = cov_exp(
                    &[design.rows()[(i, 0)]],
                    &[design.rows()[(j, 0)]],
                    &cov,
                );
            }
        }
        let mut k = DVector::zeros(n);
        for i in 0..n {
            k[i] = cov_exp(&theta, &[design.rows()[(i, 0)]], &cov);
        }
        let sinv = sigma.try_inverse().unwrap();
        let m_oracle = k.dot(&(&sinv * &y));
        let v_oracle = cov.kappa - k.dot(&(&sinv * &k));
        assert_relative_eq!(m, m_oracle, epsilon = 1e-10);
        assert_relative_eq!(v, v_oracle, epsilon = 1e-10);
    }

    #[test]
    fn sill_rescaling_scales_variance_only() {
        let design = design_1d(6);
        let y = DVector::from_column_slice(&[0.3, 1.1, -0.4, 0.9, 2.0, 0.0]);
        let cov = ExpCovParams {
            zeta: 0.02,
            kappa: 0.9,
            phi: vec![0.3],
        };
        let em = ScoreEmulator::assemble(design.rows().clone(), y, MeanSpec::Zero, cov, None)
            .unwrap();
        let theta = [0.33];
        let (m0, v0) = em.predict(&theta, None).unwrap();
        let (m1, v1) = em.predict_with_sill(&theta, None, 0.9).unwrap();
        assert_eq!((m0, v0), (m1, v1));
        let (m2, v2) = em.predict_with_sill(&theta, None, 1.8).unwrap();
        assert_eq!(m2, m0);
        assert_relative_eq!(v2, 2.0 * v0, epsilon = 1e-12);
        let (_, v3) = em.predict_with_sill(&theta, None, 1e-7).unwrap();
        assert!(v3 >= 0.0);
    }

    #[test]
    fn reml_objective_matches_projection_oracle() {
        // 5-point toy, dense hand-assembled projection matrix
        let dm = DMatrix::from_column_slice(5, 1, &[0.0, 0.25, 0.5, 0.75, 1.0]);
        let y = DVector::from_column_slice(&[0.2, 0.8, 1.3, 1.9, 2.4]);
        let x = DMatrix::from_fn(5, 2, |i, c| if c == 0 { 1.0 } else { dm[(i, 0)] });
        let lp = [(0.1f64).ln(), (0.7f64).ln(), (0.4f64).ln()];
        let (val, _) = neg_restricted_loglik(&dm, &y, &x, &lp).unwrap();
        // oracle
        let params = ExpCovParams::from_log(&lp);
        let mut sigma = DMatrix::zeros(5, 5);
        for i in 0..5 {
            for j in 0..5 {
                sigma[(i, j)] = cov_exp(&[dm[(i, 0)]], &[dm[(j, 0)]], &params);
            }
        }
        let sinv = sigma.clone().try_inverse().unwrap();
        let gram = x.transpose() * &sinv * &x;
        let p = &sinv - &sinv * &x * gram.clone().try_inverse().unwrap() * x.transpose() * &sinv;
        let oracle = 0.5
            * ((5.0 - 2.0) * (2.0 * PI).ln()
                + sigma.determinant().ln()
                + gram.determinant().ln()
                + (&p * &y).dot(&y));
        assert_relative_eq!(val, oracle, epsilon = 1e-10);
    }

    #[test]
    fn reml_fit_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 24;
        let rows = DMatrix::from_fn(n, 2, |_, _| rng.gen::<f64>());
        let design = DesignMatrix::from_rows(rows.clone()).unwrap();
        let w = DMatrix::from_fn(n, 1, |i, _| rows[(i, 0)] * 2.0 - 1.0);
        let scores: Vec<f64> = (0..n)
            .map(|i| 1.5 * w[(i, 0)] + 0.05 * rng.gen::<f64>())
            .collect();
        let em1 = fit_reml_spline_mean(&design, &scores, &w, &[2], 4).unwrap();

        // reversed row order
        let perm: Vec<usize> = (0..n).rev().collect();
        let rows2 = DMatrix::from_fn(n, 2, |i, c| rows[(perm[i], c)]);
        let design2 = DesignMatrix::from_rows(rows2).unwrap();
        let w2 = DMatrix::from_fn(n, 1, |i, _| w[(perm[i], 0)]);
        let scores2: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
        let em2 = fit_reml_spline_mean(&design2, &scores2, &w2, &[2], 4).unwrap();

        assert_eq!(em1.cov, em2.cov);
        match (&em1.mean, &em2.mean) {
            (MeanSpec::Spline { beta: b1, .. }, MeanSpec::Spline { beta: b2, .. }) => {
                for (a, b) in b1.iter().zip(b2.iter()) {
                    assert_relative_eq!(a, b, epsilon = 1e-10);
                }
            }
            _ => panic!("expected spline means"),
        }
    }

    #[test]
    fn noiseless_linear_scores_select_small_dof() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let n = 40;
        let rows = DMatrix::from_fn(n, 2, |_, _| rng.gen::<f64>());
        let design = DesignMatrix::from_rows(rows.clone()).unwrap();
        let w = DMatrix::from_fn(n, 1, |i, _| rows[(i, 0)] * 3.0 - 1.0);
        let scores: Vec<f64> = (0..n).map(|i| 2.0 * w[(i, 0)] - 0.5).collect();
        let em = fit_reml_spline_mean(&design, &scores, &w, &[1, 2, 3], 5).unwrap();
        match &em.mean {
            MeanSpec::Spline { dof, .. } => assert_eq!(*dof, 1, "selected dof"),
            _ => panic!("expected spline mean"),
        }
        let signal_var = score_variance(&scores);
        assert!(
            em.cov.kappa < 1e-6 * signal_var,
            "kappa {} vs signal {signal_var}",
            em.cov.kappa
        );
    }
}
