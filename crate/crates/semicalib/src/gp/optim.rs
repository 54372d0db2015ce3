//! Box-constrained quasi-Newton minimizer used for covariance parameter
//! estimation, plus the deterministic low-discrepancy start grid.

use nalgebra::{DMatrix, DVector};

/// Objective returning value and gradient, or None where undefined
/// (e.g. covariance factorization failure).
pub type GradFn<'a> = &'a dyn Fn(&DVector<f64>) -> Option<(f64, DVector<f64>)>;

fn clamp_into(x: &mut DVector<f64>, lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// BFGS with Armijo backtracking; iterates are clamped to the box.
pub fn minimize_bfgs(
    f: GradFn,
    x0: &DVector<f64>,
    lo: &[f64],
    hi: &[f64],
    max_iter: usize,
) -> Option<(DVector<f64>, f64)> {
    let n = x0.len();
    let mut x = x0.clone();
    clamp_into(&mut x, lo, hi);
    let (mut fx, mut g) = f(&x)?;
    let mut h = DMatrix::<f64>::identity(n, n);

    for _ in 0..max_iter {
        let mut dir = -(&h * &g);
        if dir.dot(&g) >= 0.0 {
            h = DMatrix::identity(n, n);
            dir = -g.clone();
        }
        let gd = g.dot(&dir);
        if gd.abs() < 1e-12 * (1.0 + fx.abs()) {
            break;
        }
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..50 {
            let mut cand = &x + &dir * t;
            clamp_into(&mut cand, lo, hi);
            if let Some((fc, gc)) = f(&cand) {
                if fc <= fx + 1e-4 * t * gd {
                    accepted = Some((cand, fc, gc));
                    break;
                }
            }
            t *= 0.5;
        }
        let (xn, fn_, gn) = match accepted {
            Some(a) => a,
            None => break,
        };
        let s = &xn - &x;
        let yv = &gn - &g;
        if s.norm() < 1e-12 * (1.0 + x.norm()) {
            x = xn;
            fx = fn_;
            break;
        }
        let sy = s.dot(&yv);
        if sy > 1e-12 * s.norm() * yv.norm() {
            // inverse-Hessian BFGS update
            let rho = 1.0 / sy;
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            let ss = &s * s.transpose();
            let hys = &hy * s.transpose();
            h = &h + ss * (rho * (1.0 + rho * yhy)) - (&hys + hys.transpose()) * rho;
        } else {
            h = DMatrix::identity(n, n);
        }
        x = xn;
        fx = fn_;
        g = gn;
        if g.amax() < 1e-9 * (1.0 + fx.abs()) {
            break;
        }
    }
    Some((x, fx))
}

/// Halton low-discrepancy point, bases indexed per dimension.
pub fn halton(index: usize, dim: usize) -> f64 {
    const PRIMES: [usize; 12] = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37];
    let base = PRIMES[dim % PRIMES.len()];
    let mut f = 1.0;
    let mut r = 0.0;
    let mut i = index;
    while i > 0 {
        f /= base as f64;
        r += f * (i % base) as f64;
        i /= base;
    }
    r
}

/// Deterministic multi-start grid inside the box: the box midpoint plus
/// Halton points.
pub fn start_points(n_starts: usize, lo: &[f64], hi: &[f64]) -> Vec<DVector<f64>> {
    let d = lo.len();
    let mut starts = Vec::with_capacity(n_starts);
    let mid = DVector::from_fn(d, |i, _| 0.5 * (lo[i] + hi[i]));
    starts.push(mid);
    for s in 1..n_starts {
        starts.push(DVector::from_fn(d, |i, _| {
            lo[i] + (hi[i] - lo[i]) * halton(s, i)
        }));
    }
    starts
}
