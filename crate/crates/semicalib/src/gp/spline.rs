//! Natural cubic spline basis with knots at equispaced quantiles.
//!
//! For `dof` degrees of freedom the basis has `dof` columns: the identity
//! column plus the truncated-power natural-spline functions built from
//! `dof + 1` knots (boundary knots at the data extremes). `dof = 1` is the
//! plain linear term.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SplineBasis {
    knots: Vec<f64>,
    dof: usize,
}

impl SplineBasis {
    /// Build from training values; knots at equispaced quantiles of the
    /// sorted values. Fails on degenerate (constant/duplicated) values
    /// when dof > 1.
    pub fn from_values(values: &[f64], dof: usize) -> Result<Self> {
        if dof < 1 {
            return Err(Error::Validation("spline dof must be >= 1".into()));
        }
        // a (near-)constant score column carries no information beyond the
        // intercept; give it an empty basis instead of a singular one
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 1e-12 * (1.0 + lo.abs().max(hi.abs())) {
            return Ok(SplineBasis { knots: Vec::new(), dof: 0 });
        }
        if dof == 1 {
            return Ok(SplineBasis { knots: Vec::new(), dof });
        }
        let mut sorted: Vec<f64> = values.to_vec();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n_knots = dof + 1;
        let mut knots = Vec::with_capacity(n_knots);
        for k in 0..n_knots {
            let q = k as f64 / (n_knots - 1) as f64;
            let pos = q * (sorted.len() - 1) as f64;
            let i = pos.floor() as usize;
            let frac = pos - i as f64;
            let v = if i + 1 < sorted.len() {
                sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
            } else {
                sorted[i]
            };
            knots.push(v);
        }
        for w in knots.windows(2) {
            if w[1] - w[0] <= 1e-12 * (1.0 + w[0].abs()) {
                return Err(Error::fit(
                    "spline",
                    format!("duplicated knots at {} (degenerate scores)", w[0]),
                ));
            }
        }
        Ok(SplineBasis { knots, dof })
    }

    pub fn dof(&self) -> usize {
        self.dof
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn from_knots(knots: Vec<f64>, dof: usize) -> Self {
        SplineBasis { knots, dof }
    }

    /// Evaluate the `dof` basis columns at `x`.
    pub fn eval(&self, x: f64) -> Vec<f64> {
        if self.dof == 0 {
            return Vec::new();
        }
        let mut out = Vec::with_capacity(self.dof);
        out.push(x);
        if self.dof == 1 {
            return out;
        }
        let kn = &self.knots;
        let big_k = kn.len();
        let pow3 = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
        let d = |k: usize, x: f64| {
            (pow3(x - kn[k]) - pow3(x - kn[big_k - 1])) / (kn[big_k - 1] - kn[k])
        };
        for k in 0..(big_k - 2) {
            out.push(d(k, x) - d(big_k - 2, x));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn linear_dof_is_identity() {
        let b = SplineBasis::from_values(&[0.0, 1.0, 2.0], 1).unwrap();
        assert_eq!(b.eval(3.5), vec![3.5]);
    }

    #[test]
    fn column_count_matches_dof() {
        let vals: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        for dof in 1..=5 {
            let b = SplineBasis::from_values(&vals, dof).unwrap();
            assert_eq!(b.eval(0.3).len(), dof);
        }
    }

    #[test]
    fn linear_beyond_boundary_knots() {
        // natural splines are linear outside the boundary knots: second
        // differences vanish there
        let vals: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let b = SplineBasis::from_values(&vals, 4).unwrap();
        let h = 0.05;
        for x0 in [-2.0, 3.0] {
            let f: Vec<Vec<f64>> = [x0 - h, x0, x0 + h].iter().map(|&x| b.eval(x)).collect();
            for c in 0..4 {
                let second = f[0][c] - 2.0 * f[1][c] + f[2][c];
                assert_relative_eq!(second, 0.0, epsilon = 1e-8);
            }
        }
    }

    #[test]
    fn constant_values_give_empty_basis() {
        let vals = vec![1.0; 10];
        for dof in [1, 3] {
            let b = SplineBasis::from_values(&vals, dof).unwrap();
            assert_eq!(b.dof(), 0);
            assert!(b.eval(0.7).is_empty());
        }
        // non-constant but heavily tied values still fail knot placement
        let mut tied = vec![0.0; 30];
        tied[29] = 1.0;
        assert!(SplineBasis::from_values(&tied, 4).is_err());
        assert_eq!(SplineBasis::from_values(&tied, 1).unwrap().dof(), 1);
    }

    #[test]
    fn knots_interior_to_range() {
        let vals: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
        let b = SplineBasis::from_values(&vals, 3).unwrap();
        let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        for &k in b.knots() {
            assert!(k >= lo - 1e-12 && k <= hi + 1e-12);
        }
    }
}
