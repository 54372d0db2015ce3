//! Spatial grids, ensemble and observation containers, the thickness
//! transform, and basic ingestion/regridding.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Thickness values at or below this are treated as zero on ingestion.
pub const ZERO_THICKNESS_EPS: f64 = 1e-12;

/// Bijective link between the real line and positive thickness:
/// identity above 1, exponential below.
pub fn transform_q(x: f64) -> f64 {
    if x > 1.0 {
        x
    } else {
        (x - 1.0).exp()
    }
}

/// Inverse of [`transform_q`]; defined for positive arguments only.
pub fn inverse_q(y: f64) -> Result<f64> {
    if y <= 0.0 {
        return Err(Error::Domain(format!(
            "inverse_q requires a positive argument, got {y}"
        )));
    }
    Ok(if y > 1.0 { y } else { 1.0 + y.ln() })
}

/// Log-derivative of the transform; diagnostics only, it cancels in the
/// posterior because it carries no model parameters.
pub fn log_jacobian_q(x: f64) -> f64 {
    if x > 1.0 {
        0.0
    } else {
        x - 1.0
    }
}

/// Regular planar grid of cell centers, row-major ordering fixed for the
/// life of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialGrid {
    pub nx: usize,
    pub ny: usize,
    pub cell_size_km: f64,
    pub x0: f64,
    pub y0: f64,
    coords: Vec<(f64, f64)>,
}

impl SpatialGrid {
    pub fn new(nx: usize, ny: usize, cell_size_km: f64, x0: f64, y0: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::Validation("grid dimensions must be positive".into()));
        }
        if !(cell_size_km > 0.0) {
            return Err(Error::Validation(format!(
                "cell size must be positive, got {cell_size_km}"
            )));
        }
        let mut coords = Vec::with_capacity(nx * ny);
        for iy in 0..ny {
            for ix in 0..nx {
                coords.push((x0 + ix as f64 * cell_size_km, y0 + iy as f64 * cell_size_km));
            }
        }
        Ok(SpatialGrid {
            nx,
            ny,
            cell_size_km,
            x0,
            y0,
            coords,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    /// Planar coordinate (km) of cell `j` in row-major order.
    pub fn coord(&self, j: usize) -> (f64, f64) {
        self.coords[j]
    }

    pub fn coords(&self) -> &[(f64, f64)] {
        &self.coords
    }

    /// Bounding box as (xmin, ymin, xmax, ymax).
    pub fn extent(&self) -> (f64, f64, f64, f64) {
        (
            self.x0,
            self.y0,
            self.x0 + (self.nx - 1) as f64 * self.cell_size_km,
            self.y0 + (self.ny - 1) as f64 * self.cell_size_km,
        )
    }
}

/// Design of the ensemble: one row per model run, inputs rescaled to [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct DesignMatrix {
    rows: DMatrix<f64>,
    pub names: Vec<String>,
}

impl DesignMatrix {
    pub fn new(rows: DMatrix<f64>, names: Vec<String>) -> Result<Self> {
        if names.len() != rows.ncols() {
            return Err(Error::Validation(format!(
                "{} parameter names for {} columns",
                names.len(),
                rows.ncols()
            )));
        }
        for v in rows.iter() {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Validation(format!(
                    "design entries must lie in [0,1], got {v}"
                )));
            }
        }
        for i in 0..rows.nrows() {
            for k in (i + 1)..rows.nrows() {
                if rows.row(i) == rows.row(k) {
                    return Err(Error::Validation(format!(
                        "duplicate design rows {i} and {k}"
                    )));
                }
            }
        }
        Ok(DesignMatrix { rows, names })
    }

    pub fn from_rows(rows: DMatrix<f64>) -> Result<Self> {
        let names = (0..rows.ncols()).map(|b| format!("theta{}", b + 1)).collect();
        Self::new(rows, names)
    }

    pub fn n_runs(&self) -> usize {
        self.rows.nrows()
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    pub fn rows(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn run(&self, i: usize) -> Vec<f64> {
        self.rows.row(i).iter().cloned().collect()
    }
}

/// Ensemble output: nonnegative thickness per (run, cell) with derived
/// presence indicators.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutput {
    values: DMatrix<f64>,
    presence: DMatrix<f64>,
}

impl EnsembleOutput {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        let mut values = values;
        for v in values.iter_mut() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::Validation(format!(
                    "thickness values must be finite and nonnegative, got {v}"
                )));
            }
            if *v <= ZERO_THICKNESS_EPS {
                *v = 0.0;
            }
        }
        let presence = values.map(|v| if v > 0.0 { 1.0 } else { 0.0 });
        Ok(EnsembleOutput { values, presence })
    }

    pub fn n_runs(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_cells(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn presence(&self) -> &DMatrix<f64> {
        &self.presence
    }
}

/// A single observed semi-continuous field with positive cells indexed
/// first through a stored permutation (grid data is never reordered).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationField {
    z: Vec<f64>,
    presence: Vec<f64>,
    m: usize,
    positive_index: Vec<usize>,
}

impl ObservationField {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        let mut z = z;
        for v in z.iter_mut() {
            if !v.is_finite() || *v < 0.0 {
                return Err(Error::Validation(format!(
                    "observed thickness must be finite and nonnegative, got {v}"
                )));
            }
            if *v <= ZERO_THICKNESS_EPS {
                *v = 0.0;
            }
        }
        let presence: Vec<f64> = z.iter().map(|&v| if v > 0.0 { 1.0 } else { 0.0 }).collect();
        let mut positive_index: Vec<usize> = (0..z.len()).filter(|&j| z[j] > 0.0).collect();
        let m = positive_index.len();
        positive_index.extend((0..z.len()).filter(|&j| z[j] == 0.0));
        Ok(ObservationField {
            z,
            presence,
            m,
            positive_index,
        })
    }

    pub fn n_cells(&self) -> usize {
        self.z.len()
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn presence(&self) -> &[f64] {
        &self.presence
    }

    /// Number of cells with positive observed thickness.
    pub fn n_positive(&self) -> usize {
        self.m
    }

    /// Permutation placing positive cells first: the first
    /// [`Self::n_positive`] entries are grid indices of positive cells.
    pub fn positive_index(&self) -> &[usize] {
        &self.positive_index
    }

    /// Positive observed thicknesses in permutation order (length m).
    pub fn z_positive(&self) -> Vec<f64> {
        self.positive_index[..self.m].iter().map(|&j| self.z[j]).collect()
    }
}

/// Bilinear interpolation of a fine-grid field at the cell centers of a
/// coarser target grid. Negative interpolants are clamped to zero.
pub fn regrid_linear(
    fine_grid: &SpatialGrid,
    fine_field: &[f64],
    target: &SpatialGrid,
) -> Result<Vec<f64>> {
    if fine_field.len() != fine_grid.n_cells() {
        return Err(Error::Ingestion(format!(
            "fine field has {} values for a grid of {} cells",
            fine_field.len(),
            fine_grid.n_cells()
        )));
    }
    let (fx0, fy0, fx1, fy1) = fine_grid.extent();
    let (tx0, ty0, tx1, ty1) = target.extent();
    if tx0 < fx0 - 1e-9 || ty0 < fy0 - 1e-9 || tx1 > fx1 + 1e-9 || ty1 > fy1 + 1e-9 {
        return Err(Error::Ingestion(
            "fine grid does not cover the target grid extent".into(),
        ));
    }
    let mut out = Vec::with_capacity(target.n_cells());
    let h = fine_grid.cell_size_km;
    for &(x, y) in target.coords() {
        let gx = ((x - fx0) / h).clamp(0.0, (fine_grid.nx - 1) as f64);
        let gy = ((y - fy0) / h).clamp(0.0, (fine_grid.ny - 1) as f64);
        let ix = (gx.floor() as usize).min(fine_grid.nx.saturating_sub(2));
        let iy = (gy.floor() as usize).min(fine_grid.ny.saturating_sub(2));
        let tx = gx - ix as f64;
        let ty = gy - iy as f64;
        let idx = |ix: usize, iy: usize| iy * fine_grid.nx + ix;
        let v = if fine_grid.nx == 1 && fine_grid.ny == 1 {
            fine_field[0]
        } else if fine_grid.nx == 1 {
            let a = fine_field[idx(0, iy)];
            let b = fine_field[idx(0, iy + 1)];
            a * (1.0 - ty) + b * ty
        } else if fine_grid.ny == 1 {
            let a = fine_field[idx(ix, 0)];
            let b = fine_field[idx(ix + 1, 0)];
            a * (1.0 - tx) + b * tx
        } else {
            let v00 = fine_field[idx(ix, iy)];
            let v10 = fine_field[idx(ix + 1, iy)];
            let v01 = fine_field[idx(ix, iy + 1)];
            let v11 = fine_field[idx(ix + 1, iy + 1)];
            v00 * (1.0 - tx) * (1.0 - ty)
                + v10 * tx * (1.0 - ty)
                + v01 * (1.0 - tx) * ty
                + v11 * tx * ty
        };
        out.push(v.max(0.0));
    }
    Ok(out)
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn parse_tokens(path: &Path, text: &str) -> Result<Vec<f64>> {
    text.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(path.display().to_string(), format!("bad number `{t}`")))
        })
        .collect()
}

/// Grid file: single line `nx ny cell_size_km x0 y0`.
pub fn read_grid(path: &Path) -> Result<SpatialGrid> {
    let text = read_to_string(path)?;
    let toks = parse_tokens(path, &text)?;
    if toks.len() != 5 {
        return Err(Error::parse(
            path.display().to_string(),
            format!("grid file needs 5 values, found {}", toks.len()),
        ));
    }
    SpatialGrid::new(toks[0] as usize, toks[1] as usize, toks[2], toks[3], toks[4])
}

pub fn write_grid(path: &Path, grid: &SpatialGrid) -> Result<()> {
    let text = format!(
        "{} {} {} {} {}\n",
        grid.nx, grid.ny, grid.cell_size_km, grid.x0, grid.y0
    );
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Observation file: p whitespace-delimited values, row-major grid order.
pub fn read_observation(path: &Path) -> Result<ObservationField> {
    let text = read_to_string(path)?;
    ObservationField::new(parse_tokens(path, &text)?)
}

pub fn write_observation(path: &Path, field: &[f64]) -> Result<()> {
    let mut out = String::new();
    for v in field {
        out.push_str(&format!("{v:.17e}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Ensemble text file: header `n p d`, then the n×d design matrix, then the
/// n×p output matrix, whitespace-delimited.
pub fn read_ensemble_text(path: &Path) -> Result<(DesignMatrix, EnsembleOutput)> {
    let text = read_to_string(path)?;
    let toks = parse_tokens(path, &text)?;
    parse_ensemble_tokens(path, &toks)
}

fn parse_ensemble_tokens(path: &Path, toks: &[f64]) -> Result<(DesignMatrix, EnsembleOutput)> {
    if toks.len() < 3 {
        return Err(Error::parse(path.display().to_string(), "missing header"));
    }
    let (n, p, d) = (toks[0] as usize, toks[1] as usize, toks[2] as usize);
    let expected = 3 + n * d + n * p;
    if toks.len() != expected {
        return Err(Error::parse(
            path.display().to_string(),
            format!("expected {expected} values for n={n} p={p} d={d}, found {}", toks.len()),
        ));
    }
    let design = DMatrix::from_row_slice(n, d, &toks[3..3 + n * d]);
    let values = DMatrix::from_row_slice(n, p, &toks[3 + n * d..]);
    Ok((DesignMatrix::from_rows(design)?, EnsembleOutput::new(values)?))
}

pub fn write_ensemble_text(
    path: &Path,
    design: &DesignMatrix,
    ensemble: &EnsembleOutput,
) -> Result<()> {
    let n = design.n_runs();
    let d = design.dim();
    let p = ensemble.n_cells();
    let mut out = format!("{n} {p} {d}\n");
    for i in 0..n {
        let row: Vec<String> = (0..d).map(|b| format!("{:.17e}", design.rows()[(i, b)])).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    for i in 0..n {
        let row: Vec<String> = (0..p)
            .map(|j| format!("{:.17e}", ensemble.values()[(i, j)]))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

fn header_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".hdr");
    std::path::PathBuf::from(s)
}

/// Binary ensemble: flat little-endian f64 (design rows then output rows)
/// with a `<file>.hdr` sidecar holding the `n p d` header.
pub fn read_ensemble_binary(path: &Path) -> Result<(DesignMatrix, EnsembleOutput)> {
    let hdr = header_path(path);
    let text = read_to_string(&hdr)?;
    let head = parse_tokens(&hdr, &text)?;
    if head.len() != 3 {
        return Err(Error::parse(hdr.display().to_string(), "header needs `n p d`"));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::parse(path.display().to_string(), "length not a multiple of 8"));
    }
    let mut toks = head;
    toks.extend(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())));
    parse_ensemble_tokens(path, &toks)
}

pub fn write_ensemble_binary(
    path: &Path,
    design: &DesignMatrix,
    ensemble: &EnsembleOutput,
) -> Result<()> {
    let n = design.n_runs();
    let d = design.dim();
    let p = ensemble.n_cells();
    let mut bytes = Vec::with_capacity(8 * n * (d + p));
    for i in 0..n {
        for b in 0..d {
            bytes.extend_from_slice(&design.rows()[(i, b)].to_le_bytes());
        }
    }
    for i in 0..n {
        for j in 0..p {
            bytes.extend_from_slice(&ensemble.values()[(i, j)].to_le_bytes());
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    fs::File::create(header_path(path))
        .and_then(|mut f| writeln!(f, "{n} {p} {d}"))
        .map_err(|e| Error::io(header_path(path).display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn transform_identity_branch() {
        assert_eq!(transform_q(2117.0), 2117.0);
        assert_eq!(transform_q(1.0), 1.0);
        assert_relative_eq!(transform_q(0.0), (-1.0f64).exp(), max_relative = 1e-15);
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(inverse_q(2117.0).unwrap(), 2117.0);
        assert_relative_eq!(inverse_q(0.5).unwrap(), 1.0 + 0.5f64.ln(), max_relative = 1e-15);
        assert_relative_eq!(inverse_q((-1.0f64).exp()).unwrap(), 0.0, epsilon = 1e-15);
        assert!(inverse_q(0.0).is_err());
        assert!(inverse_q(-1.0).is_err());
    }

    #[test]
    fn log_jacobian_examples() {
        assert_eq!(log_jacobian_q(5.0), 0.0);
        assert_eq!(log_jacobian_q(1.0), 0.0);
        assert_eq!(log_jacobian_q(0.0), -1.0);
    }

    #[test]
    fn transform_c1_at_one() {
        // finite-difference slope at 1±h tends to 1
        for &h in &[1e-3, 1e-5, 1e-7] {
            let right = (transform_q(1.0 + h) - transform_q(1.0)) / h;
            let left = (transform_q(1.0) - transform_q(1.0 - h)) / h;
            assert!((right - 1.0).abs() < 10.0 * h, "right slope {right}");
            assert!((left - 1.0).abs() < 10.0 * h, "left slope {left}");
        }
    }

    proptest! {
        #[test]
        fn q_round_trip(x in -50.0f64..1e6) {
            let y = transform_q(x);
            prop_assert!(y > 0.0);
            let back = inverse_q(y).unwrap();
            prop_assert!((back - x).abs() <= 1e-9 * (1.0 + x.abs()));
        }

        #[test]
        fn q_monotone(a in -50.0f64..1e4, b in -50.0f64..1e4) {
            if a < b {
                prop_assert!(transform_q(a) < transform_q(b));
            }
        }
    }

    #[test]
    fn observation_permutation() {
        let f = ObservationField::new(vec![0.0, 2.0, 0.0, 1.5, 3.0]).unwrap();
        assert_eq!(f.n_positive(), 3);
        assert_eq!(&f.positive_index()[..3], &[1, 3, 4]);
        assert_eq!(f.z_positive(), vec![2.0, 1.5, 3.0]);
        assert_eq!(f.presence(), &[0.0, 1.0, 0.0, 1.0, 1.0]);
    }

    #[test]
    fn thickness_dust_is_zero() {
        let f = ObservationField::new(vec![1e-13, 5.0]).unwrap();
        assert_eq!(f.z()[0], 0.0);
        assert_eq!(f.n_positive(), 1);
    }

    #[test]
    fn regrid_constant_and_linear() {
        let fine = SpatialGrid::new(9, 9, 1.0, 0.0, 0.0).unwrap();
        let target = SpatialGrid::new(3, 3, 2.0, 1.0, 1.0).unwrap();
        let c: Vec<f64> = vec![7.5; fine.n_cells()];
        let out = regrid_linear(&fine, &c, &target).unwrap();
        for v in &out {
            assert_relative_eq!(*v, 7.5, max_relative = 1e-12);
        }
        // linear in x is reproduced exactly
        let lin: Vec<f64> = fine.coords().iter().map(|&(x, _)| 2.0 * x + 1.0).collect();
        let out = regrid_linear(&fine, &lin, &target).unwrap();
        for (v, &(x, _)) in out.iter().zip(target.coords()) {
            assert_relative_eq!(*v, 2.0 * x + 1.0, max_relative = 1e-12);
        }
    }

    #[test]
    fn regrid_matches_oracle_on_random_field() {
        // independent per-cell bilinear oracle on a 4x-finer field
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let fine = SpatialGrid::new(17, 13, 0.5, -1.0, 2.0).unwrap();
        let field: Vec<f64> = (0..fine.n_cells()).map(|_| rng.gen_range(0.0..100.0)).collect();
        let target = SpatialGrid::new(4, 3, 2.0, 0.0, 3.0).unwrap();
        let out = regrid_linear(&fine, &field, &target).unwrap();
        for (k, &(x, y)) in target.coords().iter().enumerate() {
            let gx = (x - fine.x0) / fine.cell_size_km;
            let gy = (y - fine.y0) / fine.cell_size_km;
            let ix = (gx.floor() as usize).min(fine.nx - 2);
            let iy = (gy.floor() as usize).min(fine.ny - 2);
            let (tx, ty) = (gx - ix as f64, gy - iy as f64);
            let g = |ix: usize, iy: usize| field[iy * fine.nx + ix];
            let expect = g(ix, iy) * (1.0 - tx) * (1.0 - ty)
                + g(ix + 1, iy) * tx * (1.0 - ty)
                + g(ix, iy + 1) * (1.0 - tx) * ty
                + g(ix + 1, iy + 1) * tx * ty;
            assert_relative_eq!(out[k], expect.max(0.0), max_relative = 1e-12);
        }
    }

    #[test]
    fn regrid_extent_mismatch_errors() {
        let fine = SpatialGrid::new(4, 4, 1.0, 0.0, 0.0).unwrap();
        let target = SpatialGrid::new(4, 4, 2.0, 0.0, 0.0).unwrap();
        let f = vec![0.0; fine.n_cells()];
        assert!(regrid_linear(&fine, &f, &target).is_err());
    }

    #[test]
    fn ensemble_round_trip_text_and_binary() {
        let design = DesignMatrix::from_rows(DMatrix::from_row_slice(
            2,
            2,
            &[0.1, 0.2, 0.7, 0.9],
        ))
        .unwrap();
        let ens = EnsembleOutput::new(DMatrix::from_row_slice(
            2,
            3,
            &[0.0, 1.25, 3.5, 2.0, 0.0, 0.125],
        ))
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let tpath = dir.path().join("ens.txt");
        write_ensemble_text(&tpath, &design, &ens).unwrap();
        let (d2, e2) = read_ensemble_text(&tpath).unwrap();
        assert_eq!(d2.rows(), design.rows());
        assert_eq!(e2.values(), ens.values());
        assert_eq!(e2.presence(), ens.presence());

        let bpath = dir.path().join("ens.bin");
        write_ensemble_binary(&bpath, &design, &ens).unwrap();
        let (d3, e3) = read_ensemble_binary(&bpath).unwrap();
        assert_eq!(d3.rows(), design.rows());
        assert_eq!(e3.values(), ens.values());
        assert_eq!(e3.presence(), ens.presence());
    }

    #[test]
    fn design_validation() {
        assert!(DesignMatrix::from_rows(DMatrix::from_row_slice(1, 2, &[0.0, 1.2])).is_err());
        assert!(DesignMatrix::from_rows(DMatrix::from_row_slice(
            2,
            2,
            &[0.5, 0.5, 0.5, 0.5]
        ))
        .is_err());
    }
}
