//! Synthetic-truth scenarios: a model run is promoted to "observation"
//! after contaminating its presence pattern with an ensemble-derived
//! discrepancy and adding a Gaussian random field to the surviving
//! thicknesses.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{DesignMatrix, EnsembleOutput, ObservationField};
use crate::error::{Error, Result};

pub struct SyntheticScenario {
    pub true_theta: Vec<f64>,
    pub true_field: Vec<f64>,
    pub contaminated_obs: ObservationField,
    pub discrepancy_field: Vec<f64>,
    pub seed: u64,
}

/// Parameters of the GRF discrepancy added to surviving cells.
#[derive(Debug, Clone, Copy)]
pub struct GrfParams {
    pub sill: f64,
    pub range_km: f64,
    pub nugget: f64,
}

impl Default for GrfParams {
    fn default() -> Self {
        GrfParams {
            sill: 4.0,
            range_km: 400.0,
            nugget: 0.01,
        }
    }
}

/// Contaminated presence pattern: rank the other runs by thickness MSE to
/// the truth run, average the per-cell thickness difference over the
/// closest fraction, subtract it from the truth, and dichotomize at 0.
pub fn contaminate_binary(
    ensemble: &EnsembleOutput,
    truth_index: usize,
    frac: f64,
) -> Result<Vec<f64>> {
    let n = ensemble.n_runs();
    let p = ensemble.n_cells();
    if truth_index >= n {
        return Err(Error::Validation(format!(
            "truth index {truth_index} out of range for {n} runs"
        )));
    }
    if !(frac > 0.0 && frac <= 1.0) {
        return Err(Error::Validation(format!(
            "contamination fraction must lie in (0, 1], got {frac}"
        )));
    }
    let values = ensemble.values();
    let truth: Vec<f64> = (0..p).map(|j| values[(truth_index, j)]).collect();
    let mut others: Vec<(f64, usize)> = (0..n)
        .filter(|&i| i != truth_index)
        .map(|i| {
            let mse = (0..p)
                .map(|j| (values[(i, j)] - truth[j]).powi(2))
                .sum::<f64>()
                / p as f64;
            (mse, i)
        })
        .collect();
    others.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let k = ((others.len() as f64 * frac).round() as usize).clamp(1, others.len());
    let mut presence = Vec::with_capacity(p);
    for j in 0..p {
        let mean_diff = others[..k]
            .iter()
            .map(|&(_, i)| values[(i, j)] - truth[j])
            .sum::<f64>()
            / k as f64;
        presence.push(if truth[j] - mean_diff > 0.0 { 1.0 } else { 0.0 });
    }
    Ok(presence)
}

/// One draw from a zero-mean Gaussian field with isotropic exponential
/// covariance `sill exp(-d/range) + nugget 1[same cell]` over the given
/// cell coordinates, via dense Cholesky.
pub fn sample_grf_exponential(
    coords: &[(f64, f64)],
    params: GrfParams,
    seed: u64,
) -> Result<Vec<f64>> {
    let p = coords.len();
    if params.sill < 0.0 || params.nugget < 0.0 || !(params.range_km > 0.0) {
        return Err(Error::Validation("invalid GRF covariance parameters".into()));
    }
    let mut cov = DMatrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            let dx = coords[i].0 - coords[j].0;
            let dy = coords[i].1 - coords[j].1;
            let dist = (dx * dx + dy * dy).sqrt();
            cov[(i, j)] = params.sill * (-dist / params.range_km).exp();
        }
        cov[(i, i)] += params.nugget;
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::Numerical("GRF covariance factorization failed".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = DVector::from_fn(p, |_, _| StandardNormal.sample(&mut rng));
    Ok((chol.l() * z).iter().cloned().collect())
}

/// Assemble a full synthetic scenario: contaminate presence first, add the
/// GRF discrepancy on surviving cells, floor at 0 (flooring flips presence
/// off).
pub fn make_scenario(
    ensemble: &EnsembleOutput,
    design: &DesignMatrix,
    coords: &[(f64, f64)],
    truth_index: usize,
    frac: f64,
    grf: GrfParams,
    seed: u64,
) -> Result<SyntheticScenario> {
    let p = ensemble.n_cells();
    if coords.len() != p {
        return Err(Error::Validation(format!(
            "{} coordinates for {p} cells",
            coords.len()
        )));
    }
    if truth_index >= design.n_runs() {
        return Err(Error::Validation("truth index out of design range".into()));
    }
    let presence = contaminate_binary(ensemble, truth_index, frac)?;
    let discrepancy = sample_grf_exponential(coords, grf, seed)?;
    let true_field: Vec<f64> = (0..p).map(|j| ensemble.values()[(truth_index, j)]).collect();
    let mut obs = vec![0.0; p];
    for j in 0..p {
        if presence[j] > 0.5 {
            obs[j] = (true_field[j] + discrepancy[j]).max(0.0);
        }
    }
    Ok(SyntheticScenario {
        true_theta: design.run(truth_index),
        true_field,
        contaminated_obs: ObservationField::new(obs)?,
        discrepancy_field: discrepancy,
        seed,
    })
}

/// Runs ranked by distance of their inputs from the design centroid,
/// farthest first (for picking a truth away from the center of the cloud).
pub fn rank_by_centroid_distance(design: &DesignMatrix) -> Vec<usize> {
    let n = design.n_runs();
    let d = design.dim();
    let mut centroid = vec![0.0; d];
    for i in 0..n {
        for c in 0..d {
            centroid[c] += design.rows()[(i, c)] / n as f64;
        }
    }
    let mut idx: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let dist2: f64 = (0..d)
                .map(|c| (design.rows()[(i, c)] - centroid[c]).powi(2))
                .sum();
            (dist2, i)
        })
        .collect();
    idx.sort_by(|a, b| b.partial_cmp(a).unwrap());
    idx.into_iter().map(|(_, i)| i).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::Rng;

    fn grid_coords(nx: usize, ny: usize, step: f64) -> Vec<(f64, f64)> {
        let mut c = Vec::new();
        for iy in 0..ny {
            for ix in 0..nx {
                c.push((ix as f64 * step, iy as f64 * step));
            }
        }
        c
    }

    #[test]
    fn identical_runs_leave_presence_unchanged() {
        let row = [0.0, 1.2, 3.0, 0.0, 0.5];
        let values = DMatrix::from_fn(4, 5, |_, j| row[j]);
        let ens = EnsembleOutput::new(values).unwrap();
        let presence = contaminate_binary(&ens, 0, 0.3).unwrap();
        assert_eq!(presence, vec![0.0, 1.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn two_run_toy_matches_hand_arithmetic() {
        // truth = run 0; runs 1 and 2 differ, run 1 is closer
        let values = DMatrix::from_row_slice(
            3,
            3,
            &[
                2.0, 0.5, 1.0, //
                2.5, 0.4, 1.0, // mse = (0.25+0.01+0)/3
                4.0, 3.0, 0.0, // mse = (4+6.25+1)/3
            ],
        );
        let ens = EnsembleOutput::new(values).unwrap();
        // frac 0.5 over 2 candidates -> k = 1, only run 1
        let presence = contaminate_binary(&ens, 0, 0.5).unwrap();
        // diffs: (0.5, -0.1, 0); truth - diff = (1.5, 0.6, 1.0) -> all on
        assert_eq!(presence, vec![1.0, 1.0, 1.0]);
        // frac 1 -> mean diff over both runs = (1.25, 0.95, -0.5)
        let presence_all = contaminate_binary(&ens, 0, 1.0).unwrap();
        // truth - diff = (0.75, -0.45, 1.5)
        assert_eq!(presence_all, vec![1.0, 0.0, 1.0]);
    }

    #[test]
    fn grf_nugget_only_has_unit_variance() {
        let coords = grid_coords(60, 54, 20.0); // p = 3240
        let f = sample_grf_exponential(
            &coords,
            GrfParams {
                sill: 0.0,
                range_km: 400.0,
                nugget: 1.0,
            },
            5,
        )
        .unwrap();
        let n = f.len() as f64;
        let mean = f.iter().sum::<f64>() / n;
        let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        assert!((0.8..1.2).contains(&var), "variance {var}");
    }

    #[test]
    fn grf_empirical_covariance_at_range() {
        // transect with 400 km spacing; average the lag-1 products over
        // all adjacent pairs and draws ~ sill e^-1
        let coords: Vec<(f64, f64)> = (0..21).map(|i| (400.0 * i as f64, 0.0)).collect();
        let params = GrfParams {
            sill: 4.0,
            range_km: 400.0,
            nugget: 0.01,
        };
        let mut sum = 0.0;
        let mut cnt = 0usize;
        let n_draws = 500;
        for s in 0..n_draws {
            let f = sample_grf_exponential(&coords, params, s).unwrap();
            for i in 0..20 {
                sum += f[i] * f[i + 1];
                cnt += 1;
            }
        }
        let emp = sum / cnt as f64;
        let target = 4.0 * (-1.0f64).exp();
        assert!(
            (emp - target).abs() < 0.15 * target,
            "empirical {emp} vs {target}"
        );
    }

    #[test]
    fn grf_deterministic_in_seed() {
        let coords = grid_coords(8, 8, 50.0);
        let a = sample_grf_exponential(&coords, GrfParams::default(), 42).unwrap();
        let b = sample_grf_exponential(&coords, GrfParams::default(), 42).unwrap();
        assert_eq!(a, b);
        let c = sample_grf_exponential(&coords, GrfParams::default(), 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_discrepancy_zero_contamination_recovers_truth() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let values = DMatrix::from_fn(6, 12, |_, _| {
            if rng.gen::<f64>() < 0.3 {
                0.0
            } else {
                0.5 + rng.gen::<f64>()
            }
        });
        // make all runs identical to kill the contamination term
        let row: Vec<f64> = (0..12).map(|j| values[(0, j)]).collect();
        let values = DMatrix::from_fn(6, 12, |_, j| row[j]);
        let ens = EnsembleOutput::new(values).unwrap();
        let rows = DMatrix::from_fn(6, 2, |i, c| (i as f64 + c as f64) / 10.0);
        let design = DesignMatrix::from_rows(rows).unwrap();
        let coords = grid_coords(4, 3, 100.0);
        let grf = GrfParams {
            sill: 0.0,
            range_km: 400.0,
            nugget: 1e-18,
        };
        let sc = make_scenario(&ens, &design, &coords, 0, 0.3, grf, 1).unwrap();
        for j in 0..12 {
            assert_relative_eq!(sc.contaminated_obs.z()[j], row[j], epsilon = 1e-8);
        }
    }

    #[test]
    fn scenario_matches_protocol_oracle() {
        // independent re-implementation of the whole protocol
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let n = 15;
        let p = 20;
        let values = DMatrix::from_fn(n, p, |_, _| {
            if rng.gen::<f64>() < 0.35 {
                0.0
            } else {
                0.2 + 2.0 * rng.gen::<f64>()
            }
        });
        let ens = EnsembleOutput::new(values.clone()).unwrap();
        let rows = DMatrix::from_fn(n, 3, |_, _| rng.gen::<f64>());
        let design = DesignMatrix::from_rows(rows).unwrap();
        let coords = grid_coords(5, 4, 80.0);
        let truth_index = 4;
        let frac = 0.3;
        let seed = 77;
        let sc = make_scenario(&ens, &design, &coords, truth_index, frac, GrfParams::default(), seed)
            .unwrap();

        // oracle, written independently of contaminate_binary internals
        let truth: Vec<f64> = (0..p).map(|j| values[(truth_index, j)]).collect();
        let mut ranked: Vec<usize> = (0..n).filter(|&i| i != truth_index).collect();
        let mse = |i: usize| -> f64 {
            (0..p).map(|j| (values[(i, j)] - truth[j]).powi(2)).sum::<f64>() / p as f64
        };
        ranked.sort_by(|&a, &b| mse(a).partial_cmp(&mse(b)).unwrap());
        let k = ((ranked.len() as f64 * frac).round() as usize).max(1);
        let grf = sample_grf_exponential(&coords, GrfParams::default(), seed).unwrap();
        for j in 0..p {
            let md: f64 =
                ranked[..k].iter().map(|&i| values[(i, j)] - truth[j]).sum::<f64>() / k as f64;
            let expect = if truth[j] - md > 0.0 {
                (truth[j] + grf[j]).max(0.0)
            } else {
                0.0
            };
            assert_relative_eq!(sc.contaminated_obs.z()[j], expect, epsilon = 1e-12);
        }
        // semi-continuity: zeros exactly where presence = 0
        for j in 0..p {
            assert_eq!(
                sc.contaminated_obs.presence()[j] == 0.0,
                sc.contaminated_obs.z()[j] == 0.0
            );
        }
    }

    #[test]
    fn centroid_ranking_puts_extremes_first() {
        let rows = DMatrix::from_row_slice(
            4,
            2,
            &[0.5, 0.5, 0.6, 0.5, 0.0, 1.0, 0.4, 0.4],
        );
        let design = DesignMatrix::from_rows(rows).unwrap();
        let ranked = rank_by_centroid_distance(&design);
        assert_eq!(ranked[0], 2);
    }
}
