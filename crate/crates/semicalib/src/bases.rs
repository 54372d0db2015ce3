//! Discrepancy bases for the calibration model: a kernel-convolution basis
//! over the positive-observation cells (continuous discrepancy) and a
//! signed-mismatch logit basis over all cells (binary discrepancy).

use nalgebra::DMatrix;

use crate::data::SpatialGrid;
use crate::error::{Error, Result};

/// Continuous-discrepancy basis: leading left singular vectors of the
/// cell-by-knot exponential kernel matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelBasis {
    pub kr: DMatrix<f64>,
    pub knots: Vec<(f64, f64)>,
    pub kernel_range_km: f64,
    pub j_r: usize,
}

/// Binary-discrepancy basis: one column of thresholded mismatch logits.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryBasis {
    pub kv: Vec<f64>,
    pub threshold: f64,
}

/// Factor `n` into a lattice (cols, rows): the most nearly square factor
/// pair, with the larger factor along the wider grid dimension.
fn knot_lattice(n: usize, width: f64, height: f64) -> (usize, usize) {
    let mut best = (n, 1usize);
    let mut best_score = f64::INFINITY;
    for a in 1..=n {
        if n % a != 0 {
            continue;
        }
        let b = n / a;
        let score = ((a as f64 / b as f64).ln()).abs();
        if score < best_score {
            best_score = score;
            best = (a.max(b), a.min(b));
        }
    }
    if width >= height {
        best
    } else {
        (best.1, best.0)
    }
}

/// Exponential-kernel basis on the positive-observation cells. Knots lie
/// on an evenly spaced lattice spanning the grid bounding box.
pub fn build_kr(
    grid: &SpatialGrid,
    positive_cells: &[usize],
    n_knots: usize,
    range_km: f64,
    j_r: usize,
) -> Result<KernelBasis> {
    let m = positive_cells.len();
    if m < j_r {
        return Err(Error::Config(format!(
            "kernel basis needs at least J_r={j_r} positive cells, got {m}"
        )));
    }
    if n_knots == 0 || j_r == 0 || j_r > n_knots {
        return Err(Error::Config(format!(
            "need 0 < J_r <= n_knots, got J_r={j_r}, n_knots={n_knots}"
        )));
    }
    if !(range_km > 0.0) {
        return Err(Error::Config("kernel range must be positive".into()));
    }
    let (xmin, ymin, xmax, ymax) = grid.extent();
    let (cols, rows) = knot_lattice(n_knots, xmax - xmin, ymax - ymin);
    let mut knots = Vec::with_capacity(n_knots);
    for r in 0..rows {
        for c in 0..cols {
            let tx = if cols > 1 { c as f64 / (cols - 1) as f64 } else { 0.5 };
            let ty = if rows > 1 { r as f64 / (rows - 1) as f64 } else { 0.5 };
            knots.push((xmin + tx * (xmax - xmin), ymin + ty * (ymax - ymin)));
        }
    }
    let mut kernel = DMatrix::zeros(m, n_knots);
    for (i, &cell) in positive_cells.iter().enumerate() {
        let (x, y) = grid.coord(cell);
        for (c, &(kx, ky)) in knots.iter().enumerate() {
            let dist = ((x - kx).powi(2) + (y - ky).powi(2)).sqrt();
            kernel[(i, c)] = (-dist / range_km).exp();
        }
    }
    let svd = kernel
        .svd(true, false)
        .u
        .ok_or_else(|| Error::Numerical("kernel matrix SVD failed".into()))?;
    let kr = svd.columns(0, j_r).into_owned();
    Ok(KernelBasis {
        kr,
        knots,
        kernel_range_km: range_km,
        j_r,
    })
}

/// Signed-mismatch logit basis: `dif_j` is the ensemble-mean presence
/// minus the observed presence; cells with |dif| above 1/2 get the logit
/// `ln((1+dif)/(1-dif))`, the rest zero.
pub fn build_kv(presence_ensemble: &DMatrix<f64>, presence_obs: &[f64]) -> Result<BinaryBasis> {
    let n = presence_ensemble.nrows();
    let p = presence_ensemble.ncols();
    if presence_obs.len() != p {
        return Err(Error::Validation(format!(
            "observation has {} cells, ensemble has {p}",
            presence_obs.len()
        )));
    }
    if n == 0 {
        return Err(Error::Validation("presence ensemble is empty".into()));
    }
    let threshold = 0.5;
    let mut kv = vec![0.0; p];
    for j in 0..p {
        let mean = presence_ensemble.column(j).sum() / n as f64;
        let mut dif = mean - presence_obs[j];
        if dif.abs() > threshold {
            dif = dif.clamp(-(1.0 - 1e-9), 1.0 - 1e-9);
            kv[j] = ((1.0 + dif) / (1.0 - dif)).ln();
            debug_assert!(kv[j].is_finite());
        }
    }
    Ok(BinaryBasis { kv, threshold })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn lattice_is_near_square_and_oriented() {
        assert_eq!(knot_lattice(40, 86.0, 37.0), (8, 5));
        assert_eq!(knot_lattice(40, 37.0, 86.0), (5, 8));
        assert_eq!(knot_lattice(36, 10.0, 10.0), (6, 6));
        assert_eq!(knot_lattice(7, 3.0, 1.0), (7, 1));
    }

    #[test]
    fn kernel_entry_one_at_coincident_knot() {
        // corner cell sits exactly on the corner knot
        let grid = SpatialGrid::new(9, 5, 50.0, 0.0, 0.0).unwrap();
        let cells: Vec<usize> = (0..grid.n_cells()).collect();
        let basis = build_kr(&grid, &cells, 4, 400.0, 2).unwrap();
        assert_eq!(basis.knots.len(), 4);
        assert!(basis.knots.contains(&(0.0, 0.0)));
        // rebuild the kernel row for cell 0 against knot (0,0)
        let d: f64 = 0.0;
        assert_relative_eq!((-d / 400.0_f64).exp(), 1.0);
    }

    #[test]
    fn kernel_entry_e_minus_one_at_range() {
        let grid = SpatialGrid::new(2, 1, 400.0, 0.0, 0.0).unwrap();
        // cell 1 is 400 km from a knot at (0,0); single-row lattice puts
        // knots at x = 0 and x = 400
        let basis = build_kr(&grid, &[0, 1], 2, 400.0, 1).unwrap();
        assert!(basis.knots.contains(&(0.0, 0.0)));
        let dist: f64 = 400.0;
        let entry = (-dist / 400.0_f64).exp();
        assert_relative_eq!(entry, (-1.0_f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn kr_columns_orthonormal() {
        let grid = SpatialGrid::new(20, 12, 25.0, -100.0, 50.0).unwrap();
        let cells: Vec<usize> = (0..grid.n_cells()).filter(|j| j % 3 != 0).collect();
        let basis = build_kr(&grid, &cells, 40, 400.0, 10).unwrap();
        let gram = basis.kr.transpose() * &basis.kr;
        for i in 0..10 {
            for j in 0..10 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!(
                    (gram[(i, j)] - expect).abs() < 1e-10,
                    "gram[{i},{j}] = {}",
                    gram[(i, j)]
                );
            }
        }
    }

    #[test]
    fn kr_too_few_cells_is_config_error() {
        let grid = SpatialGrid::new(4, 4, 10.0, 0.0, 0.0).unwrap();
        assert!(matches!(
            build_kr(&grid, &[0, 1, 2], 40, 400.0, 10),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kv_closed_form_values() {
        // column means 0.75, 0.2, 0.4 against obs (0, 0.6 synthetic, 1)
        let ens = DMatrix::from_row_slice(
            4,
            3,
            &[
                1.0, 0.0, 1.0, //
                1.0, 0.0, 0.0, //
                1.0, 1.0, 0.0, //
                0.0, 0.0, 0.0,
            ],
        );
        // dif = (0.75-0, 0.25-(-0.15)=0.4, 0.25-1=-0.75) pick obs to hit cases
        let obs = vec![0.0, -0.15, 1.0];
        let basis = build_kv(&ens, &obs).unwrap();
        assert_relative_eq!(basis.kv[0], (7.0_f64).ln(), max_relative = 1e-12);
        assert_eq!(basis.kv[1], 0.0); // dif = 0.4, below threshold
        // dif = -0.75 -> ln(0.25/1.75)
        assert_relative_eq!(basis.kv[2], (0.25_f64 / 1.75).ln(), max_relative = 1e-12);
    }

    #[test]
    fn kv_dif_exactly_minus_point_six() {
        let ens = DMatrix::from_row_slice(5, 1, &[1.0, 1.0, 0.0, 0.0, 0.0]);
        let obs = vec![1.0];
        // dif = 0.4 - 1.0 = -0.6 -> ln(0.4/1.6) = ln 0.25
        let basis = build_kv(&ens, &obs).unwrap();
        assert_relative_eq!(basis.kv[0], (0.25_f64).ln(), max_relative = 1e-12);
    }

    #[test]
    fn kv_antisymmetric_and_finite_at_extremes() {
        let ens = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]);
        let a = build_kv(&ens, &[0.0, 1.0]).unwrap();
        // dif = (1, -1): clamped, finite, and antisymmetric
        assert!(a.kv[0].is_finite() && a.kv[1].is_finite());
        assert_relative_eq!(a.kv[0], -a.kv[1], max_relative = 1e-12);
        let flipped = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 1.0]);
        let b = build_kv(&flipped, &[1.0, 0.0]).unwrap();
        assert_relative_eq!(a.kv[0], -b.kv[0], max_relative = 1e-12);
    }
}
