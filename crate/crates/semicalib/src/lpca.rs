//! Logistic principal component analysis of a binary matrix via a
//! majorization-minimization algorithm.
//!
//! The Bernoulli log-likelihood under logits `1 mu^T + W Kw^T` is majorized
//! with the uniform curvature bound 1/4 on the logistic loss, so each
//! iteration is a least-squares fit to the working response
//! `gamma + 4 (I - sigma(gamma))` with closed-form updates of mu, W, and Kw.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Error, Result};

/// Logits beyond this magnitude are flat to double precision in the
/// Bernoulli likelihood.
const LOGIT_CAP: f64 = 30.0;

/// Initialization clamp for column-frequency logits.
const INIT_MU_CAP: f64 = 4.0;

#[derive(Debug, Clone)]
pub struct LogisticPcaModel {
    pub mu: DVector<f64>,
    pub kw: DMatrix<f64>,
    pub w: DMatrix<f64>,
    pub loglik_trace: Vec<f64>,
}

impl LogisticPcaModel {
    pub fn n_components(&self) -> usize {
        self.kw.ncols()
    }

    pub fn n_cells(&self) -> usize {
        self.mu.len()
    }

    pub fn n_runs(&self) -> usize {
        self.w.nrows()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log sigma(x), numerically stable.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// Bernoulli log-likelihood of a binary matrix under the given factors,
/// with logits capped at ±30 for stability.
pub fn lpca_loglik(
    presence: &DMatrix<f64>,
    mu: &DVector<f64>,
    w: &DMatrix<f64>,
    kw: &DMatrix<f64>,
) -> f64 {
    let gamma = logits(mu, w, kw);
    let mut ll = 0.0;
    for i in 0..presence.nrows() {
        for j in 0..presence.ncols() {
            let g = gamma[(i, j)].clamp(-LOGIT_CAP, LOGIT_CAP);
            ll += if presence[(i, j)] > 0.5 {
                log_sigmoid(g)
            } else {
                log_sigmoid(-g)
            };
        }
    }
    ll
}

/// Reconstruct the full logit matrix `1 mu^T + W Kw^T`.
pub fn logits(mu: &DVector<f64>, w: &DMatrix<f64>, kw: &DMatrix<f64>) -> DMatrix<f64> {
    let n = w.nrows();
    let mut gamma = w * kw.transpose();
    for i in 0..n {
        for j in 0..mu.len() {
            gamma[(i, j)] += mu[j];
        }
    }
    gamma
}

pub fn lpca_logits(model: &LogisticPcaModel) -> DMatrix<f64> {
    logits(&model.mu, &model.w, &model.kw)
}

/// Tiny Tikhonov term keeping the Gram solves well-posed when a factor
/// collapses (e.g. an all-zero presence matrix drives W to zero).
fn ridge(gram: &mut DMatrix<f64>) {
    let j = gram.nrows();
    let eps = 1e-10 * (1.0 + gram.trace() / j as f64);
    for k in 0..j {
        gram[(k, k)] += eps;
    }
}

fn validate_binary(presence: &DMatrix<f64>) -> Result<()> {
    for v in presence.iter() {
        if *v != 0.0 && *v != 1.0 {
            return Err(Error::Validation(format!(
                "presence matrix must be binary, found {v}"
            )));
        }
    }
    Ok(())
}

/// Fit a rank-`j_w` logistic PCA by MM. Deterministic given the inputs.
pub fn fit_lpca(
    presence: &DMatrix<f64>,
    j_w: usize,
    max_iter: usize,
    tol: f64,
) -> Result<LogisticPcaModel> {
    validate_binary(presence)?;
    let (n, p) = (presence.nrows(), presence.ncols());
    if j_w < 1 || j_w >= n.min(p) {
        return Err(Error::Validation(format!(
            "j_w must satisfy 1 <= j_w < min(n,p) = {}, got {j_w}",
            n.min(p)
        )));
    }

    // init: mu from clamped column-frequency logits, factors from the SVD
    // of the centered sign matrix
    let mut mu = DVector::zeros(p);
    for j in 0..p {
        let f = presence.column(j).sum() / n as f64;
        let f = f.clamp(1e-12, 1.0 - 1e-12);
        mu[j] = (f.ln() - (1.0 - f).ln()).clamp(-INIT_MU_CAP, INIT_MU_CAP);
    }
    let mut signs = presence.map(|v| 2.0 * v - 1.0);
    let col_means: Vec<f64> = (0..p).map(|j| signs.column(j).sum() / n as f64).collect();
    for i in 0..n {
        for j in 0..p {
            signs[(i, j)] -= col_means[j];
        }
    }
    let svd = SVD::new(signs, true, true);
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut w = DMatrix::zeros(n, j_w);
    let mut kw = DMatrix::zeros(p, j_w);
    for k in 0..j_w {
        let s = svd.singular_values[k];
        for i in 0..n {
            w[(i, k)] = u[(i, k)] * s;
        }
        for j in 0..p {
            kw[(j, k)] = vt[(k, j)];
        }
    }

    let mut trace = vec![lpca_loglik(presence, &mu, &w, &kw)];
    for _ in 0..max_iter {
        // working response from the 1/4 curvature bound
        let gamma = logits(&mu, &w, &kw);
        let mut x = gamma;
        for i in 0..n {
            for j in 0..p {
                let g = x[(i, j)].clamp(-LOGIT_CAP, LOGIT_CAP);
                x[(i, j)] = g + 4.0 * (presence[(i, j)] - sigmoid(g));
            }
        }
        // alternating least squares on the fixed working response
        let wk = &w * kw.transpose();
        for j in 0..p {
            let mut s = 0.0;
            for i in 0..n {
                s += x[(i, j)] - wk[(i, j)];
            }
            mu[j] = s / n as f64;
        }
        let mut xc = x;
        for i in 0..n {
            for j in 0..p {
                xc[(i, j)] -= mu[j];
            }
        }
        let mut ktk = kw.transpose() * &kw;
        ridge(&mut ktk);
        let w_new = ktk
            .cholesky()
            .map(|ch| {
                let rhs = &xc * &kw;
                let mut out = DMatrix::zeros(n, j_w);
                for i in 0..n {
                    let sol = ch.solve(&rhs.row(i).transpose());
                    out.set_row(i, &sol.transpose());
                }
                out
            })
            .ok_or_else(|| Error::fit("lpca", "rank-deficient loading matrix"))?;
        w = w_new;
        let mut wtw = w.transpose() * &w;
        ridge(&mut wtw);
        let kw_new = wtw
            .cholesky()
            .map(|ch| {
                let rhs = xc.transpose() * &w;
                let mut out = DMatrix::zeros(p, j_w);
                for j in 0..p {
                    let sol = ch.solve(&rhs.row(j).transpose());
                    out.set_row(j, &sol.transpose());
                }
                out
            })
            .ok_or_else(|| Error::fit("lpca", "rank-deficient score matrix"))?;
        kw = kw_new;

        let ll = lpca_loglik(presence, &mu, &w, &kw);
        let prev = *trace.last().unwrap();
        if ll + 1e-9 * (1.0 + prev.abs()) < prev {
            return Err(Error::Numerical(format!(
                "lpca log-likelihood decreased from {prev} to {ll}"
            )));
        }
        trace.push(ll);
        if (ll - prev).abs() < tol * (1.0 + prev.abs()) {
            break;
        }
    }

    // orthonormalize Kw, absorbing scale into W, so serialized models are
    // free of the basis-rotation ambiguity
    let (w_o, kw_o) = orthonormalize(&w, &kw);
    Ok(LogisticPcaModel {
        mu,
        kw: kw_o,
        w: w_o,
        loglik_trace: trace,
    })
}

/// Replace (W, Kw) by an equivalent pair with orthonormal Kw columns.
fn orthonormalize(w: &DMatrix<f64>, kw: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let svd = SVD::new(kw.clone(), true, true);
    let q = svd.u.as_ref().unwrap().clone();
    let vt = svd.v_t.as_ref().unwrap();
    let j = kw.ncols();
    let mut sv = DMatrix::zeros(j, j);
    for k in 0..j {
        sv[(k, k)] = svd.singular_values[k];
    }
    // Kw = Q S V^T  =>  W Kw^T = (W V S) Q^T
    let w_new = w * vt.transpose() * sv;
    (w_new, q)
}

/// Serialization: text header `p n J_w` followed by mu, Kw, W.
pub fn write_lpca(path: &Path, model: &LogisticPcaModel) -> Result<()> {
    let (p, n, j) = (model.n_cells(), model.n_runs(), model.n_components());
    let mut out = format!("{p} {n} {j}\n");
    for v in model.mu.iter() {
        out.push_str(&format!("{v:.17e}\n"));
    }
    for r in 0..p {
        let row: Vec<String> = (0..j).map(|k| format!("{:.17e}", model.kw[(r, k)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    for r in 0..n {
        let row: Vec<String> = (0..j).map(|k| format!("{:.17e}", model.w[(r, k)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_lpca(path: &Path) -> Result<LogisticPcaModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let toks: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(path.display().to_string(), format!("bad number `{t}`")))
        })
        .collect::<Result<_>>()?;
    if toks.len() < 3 {
        return Err(Error::parse(path.display().to_string(), "missing header"));
    }
    let (p, n, j) = (toks[0] as usize, toks[1] as usize, toks[2] as usize);
    let need = 3 + p + p * j + n * j;
    if toks.len() != need {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected {need} values, found {}", toks.len()),
        ));
    }
    let mu = DVector::from_column_slice(&toks[3..3 + p]);
    let kw = DMatrix::from_row_slice(p, j, &toks[3 + p..3 + p + p * j]);
    let w = DMatrix::from_row_slice(n, j, &toks[3 + p + p * j..]);
    Ok(LogisticPcaModel {
        mu,
        kw,
        w,
        loglik_trace: Vec::new(),
    })
}
