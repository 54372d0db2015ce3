//! Likelihood-based PCA of the transformed positive thickness, with entries
//! missing wherever ice is absent, fitted by EM.
//!
//! Probabilistic PCA factor model with isotropic noise: row i of the data
//! matrix follows `h_i = Ku u_i + e_i`, `u_i ~ N(0, I)`,
//! `e_i ~ N(0, sigma_e2 I)` restricted to that row's observed cells. The
//! E-step uses only observed cells per row; the M-step updates Ku rows and
//! sigma_e2 in closed form. No separate mean term is fitted.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct PpcaModel {
    pub ku: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub sigma_e2: f64,
    pub mask: DMatrix<f64>,
    pub loglik_trace: Vec<f64>,
}

impl PpcaModel {
    pub fn n_components(&self) -> usize {
        self.ku.ncols()
    }

    pub fn n_cells(&self) -> usize {
        self.ku.nrows()
    }

    pub fn n_runs(&self) -> usize {
        self.u.nrows()
    }
}

/// Observed-data marginal Gaussian log-likelihood under the factor model.
fn observed_loglik(
    h: &DMatrix<f64>,
    mask: &DMatrix<f64>,
    ku: &DMatrix<f64>,
    sigma_e2: f64,
) -> f64 {
    let (n, _p) = (h.nrows(), h.ncols());
    let j = ku.ncols();
    let mut ll = 0.0;
    for i in 0..n {
        let obs: Vec<usize> = (0..h.ncols()).filter(|&c| mask[(i, c)] > 0.5).collect();
        let o = obs.len();
        if o == 0 {
            continue;
        }
        // Woodbury on C = Ko Ko^T + s I with the J x J core
        let mut kok = DMatrix::zeros(j, j);
        let mut kth = DVector::zeros(j);
        let mut hh = 0.0;
        for &c in &obs {
            let hij = h[(i, c)];
            hh += hij * hij;
            for a in 0..j {
                kth[a] += ku[(c, a)] * hij;
                for b in 0..j {
                    kok[(a, b)] += ku[(c, a)] * ku[(c, b)];
                }
            }
        }
        let mut core = kok / sigma_e2;
        for a in 0..j {
            core[(a, a)] += 1.0;
        }
        let chol = match core.cholesky() {
            Some(c) => c,
            None => return f64::NEG_INFINITY,
        };
        let logdet_c = o as f64 * sigma_e2.ln()
            + 2.0 * (0..j).map(|a| chol.l_dirty()[(a, a)].ln()).sum::<f64>();
        let sol = chol.solve(&kth);
        let quad = (hh - kth.dot(&sol) / sigma_e2) / sigma_e2;
        ll += -0.5 * (o as f64 * (2.0 * PI).ln() + logdet_c + quad);
    }
    ll
}

/// Fit the factor model by EM; deterministic (SVD of the mean-imputed
/// matrix as initialization).
pub fn fit_ppca_missing(
    h: &DMatrix<f64>,
    mask: &DMatrix<f64>,
    j_u: usize,
    max_iter: usize,
    tol: f64,
) -> Result<PpcaModel> {
    let (n, p) = (h.nrows(), h.ncols());
    if mask.nrows() != n || mask.ncols() != p {
        return Err(Error::Validation("mask shape mismatch".into()));
    }
    if j_u < 1 || j_u >= n.min(p) {
        return Err(Error::Validation(format!(
            "j_u must satisfy 1 <= j_u < min(n,p) = {}, got {j_u}",
            n.min(p)
        )));
    }
    for i in 0..n {
        if (0..p).all(|c| mask[(i, c)] < 0.5) {
            return Err(Error::Validation(format!("row {i} is fully missing")));
        }
    }
    for c in 0..p {
        if (0..n).all(|i| mask[(i, c)] < 0.5) {
            return Err(Error::Validation(format!("column {c} is fully missing")));
        }
    }

    // init: mean-impute, truncated SVD
    let mut imputed = h.clone();
    for c in 0..p {
        let (mut s, mut cnt) = (0.0, 0usize);
        for i in 0..n {
            if mask[(i, c)] > 0.5 {
                s += h[(i, c)];
                cnt += 1;
            }
        }
        let mean = s / cnt as f64;
        for i in 0..n {
            if mask[(i, c)] < 0.5 {
                imputed[(i, c)] = mean;
            }
        }
    }
    let svd = SVD::new(imputed, true, true);
    let vt = svd.v_t.as_ref().unwrap();
    let mut ku = DMatrix::zeros(p, j_u);
    for l in 0..j_u {
        let scale = svd.singular_values[l] / (n as f64).sqrt();
        for c in 0..p {
            ku[(c, l)] = vt[(l, c)] * scale;
        }
    }
    let total_var: f64 = {
        let mut s = 0.0;
        let mut cnt = 0usize;
        for i in 0..n {
            for c in 0..p {
                if mask[(i, c)] > 0.5 {
                    s += h[(i, c)] * h[(i, c)];
                    cnt += 1;
                }
            }
        }
        s / cnt as f64
    };
    let explained: f64 = (0..j_u)
        .map(|l| svd.singular_values[l].powi(2) / (n as f64 * p as f64))
        .sum();
    let mut sigma_e2 = (total_var - explained).max(1e-8 * total_var.max(1.0));

    let obs_sets: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..p).filter(|&c| mask[(i, c)] > 0.5).collect())
        .collect();
    let n_obs: usize = obs_sets.iter().map(|o| o.len()).sum();

    let mut trace = vec![observed_loglik(h, mask, &ku, sigma_e2)];
    let mut mu_u = DMatrix::zeros(n, j_u);
    for _ in 0..max_iter {
        // E-step: per-row posterior mean and covariance of scores
        let mut second_moments: Vec<DMatrix<f64>> = Vec::with_capacity(n);
        for i in 0..n {
            let obs = &obs_sets[i];
            let j = j_u;
            let mut kok = DMatrix::zeros(j, j);
            let mut kth = DVector::zeros(j);
            for &c in obs {
                for a in 0..j {
                    kth[a] += ku[(c, a)] * h[(i, c)];
                    for b in 0..j {
                        kok[(a, b)] += ku[(c, a)] * ku[(c, b)];
                    }
                }
            }
            let mut m = kok / sigma_e2;
            for a in 0..j {
                m[(a, a)] += 1.0;
            }
            let chol = m
                .cholesky()
                .ok_or_else(|| Error::fit("ppca", "posterior precision not SPD"))?;
            let mean = chol.solve(&(kth.clone() / sigma_e2));
            let cov = chol.inverse();
            for a in 0..j {
                mu_u[(i, a)] = mean[a];
            }
            second_moments.push(&cov + &mean * mean.transpose());
        }

        // M-step: Ku rows then sigma_e2
        let mut ku_new = DMatrix::zeros(p, j_u);
        for c in 0..p {
            let mut a_mat = DMatrix::zeros(j_u, j_u);
            let mut b_vec = DVector::zeros(j_u);
            for i in 0..n {
                if mask[(i, c)] > 0.5 {
                    a_mat += &second_moments[i];
                    for a in 0..j_u {
                        b_vec[a] += h[(i, c)] * mu_u[(i, a)];
                    }
                }
            }
            let chol = a_mat
                .cholesky()
                .ok_or_else(|| Error::fit("ppca", "singular M-step system"))?;
            let row = chol.solve(&b_vec);
            for a in 0..j_u {
                ku_new[(c, a)] = row[a];
            }
        }
        ku = ku_new;
        let mut rss = 0.0;
        for i in 0..n {
            for &c in &obs_sets[i] {
                let mut fit = 0.0;
                for a in 0..j_u {
                    fit += ku[(c, a)] * mu_u[(i, a)];
                }
                let kc = ku.row(c).transpose();
                let quad = (&second_moments[i] * &kc).dot(&kc);
                rss += h[(i, c)] * h[(i, c)] - 2.0 * h[(i, c)] * fit + quad;
            }
        }
        // floor keeps the likelihood bounded when the data are exactly
        // low-rank; below this scale the Woodbury quadratic is pure noise
        sigma_e2 = (rss / n_obs as f64).max(1e-10 * total_var.max(1e-300));

        let ll = observed_loglik(h, mask, &ku, sigma_e2);
        let prev = *trace.last().unwrap();
        if ll + 1e-6 * (1.0 + prev.abs()) < prev {
            return Err(Error::Numerical(format!(
                "ppca log-likelihood decreased from {prev} to {ll}"
            )));
        }
        trace.push(ll);
        if (ll - prev).abs() < tol * (1.0 + prev.abs()) {
            break;
        }
    }

    // orthonormalize Ku, absorbing scale into U
    let svd = SVD::new(ku.clone(), true, true);
    let q = svd.u.as_ref().unwrap().clone();
    let vt = svd.v_t.as_ref().unwrap();
    let mut sv = DMatrix::zeros(j_u, j_u);
    for k in 0..j_u {
        sv[(k, k)] = svd.singular_values[k];
    }
    let u_final = &mu_u * vt.transpose() * sv;
    Ok(PpcaModel {
        ku: q,
        u: u_final,
        sigma_e2,
        mask: mask.clone(),
        loglik_trace: trace,
    })
}

/// Row `i` of `U Ku^T` restricted to that row's observed cells; missing
/// cells carry NaN so misuse is loud.
pub fn ppca_reconstruct(model: &PpcaModel, i: usize) -> Vec<f64> {
    let p = model.n_cells();
    let mut out = vec![f64::NAN; p];
    for c in 0..p {
        if model.mask[(i, c)] > 0.5 {
            let mut v = 0.0;
            for a in 0..model.n_components() {
                v += model.u[(i, a)] * model.ku[(c, a)];
            }
            out[c] = v;
        }
    }
    out
}

/// Full reconstruction row (all cells), used by the emulator pipeline.
pub fn ppca_reconstruct_full(model: &PpcaModel, i: usize) -> Vec<f64> {
    let p = model.n_cells();
    (0..p)
        .map(|c| {
            (0..model.n_components())
                .map(|a| model.u[(i, a)] * model.ku[(c, a)])
                .sum()
        })
        .collect()
}

/// Serialization: header `p n J_u sigma_e2`, then Ku, then U.
pub fn write_ppca(path: &Path, model: &PpcaModel) -> Result<()> {
    let (p, n, j) = (model.n_cells(), model.n_runs(), model.n_components());
    let mut out = format!("{p} {n} {j} {:.17e}\n", model.sigma_e2);
    for r in 0..p {
        let row: Vec<String> = (0..j).map(|k| format!("{:.17e}", model.ku[(r, k)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    for r in 0..n {
        let row: Vec<String> = (0..j).map(|k| format!("{:.17e}", model.u[(r, k)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_ppca(path: &Path, mask: DMatrix<f64>) -> Result<PpcaModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let toks: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(path.display().to_string(), format!("bad number `{t}`")))
        })
        .collect::<Result<_>>()?;
    if toks.len() < 4 {
        return Err(Error::parse(path.display().to_string(), "missing header"));
    }
    let (p, n, j) = (toks[0] as usize, toks[1] as usize, toks[2] as usize);
    let sigma_e2 = toks[3];
    let need = 4 + p * j + n * j;
    if toks.len() != need {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected {need} values, found {}", toks.len()),
        ));
    }
    let ku = DMatrix::from_row_slice(p, j, &toks[4..4 + p * j]);
    let u = DMatrix::from_row_slice(n, j, &toks[4 + p * j..]);
    Ok(PpcaModel {
        ku,
        u,
        sigma_e2,
        mask,
        loglik_trace: Vec::new(),
    })
}
