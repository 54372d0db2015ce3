//! Scalar projection emulator: a GP over input space for future ice-volume
//! change, pushed through a posterior sample of the inputs.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::DesignMatrix;
use crate::error::{Error, Result};
use crate::gp::{fit_mle_zero_mean, ScoreEmulator};

pub struct ProjectionEmulator {
    pub emulator: ScoreEmulator,
    /// Response mean removed before the zero-mean GP fit.
    pub response_mean: f64,
}

/// Total volume change between two fields, in m³ (fields in metres, cell
/// area in km²).
pub fn volume_change_from_fields(
    field_now: &[f64],
    field_future: &[f64],
    cell_area_km2: f64,
) -> Result<f64> {
    if field_now.len() != field_future.len() {
        return Err(Error::Validation(format!(
            "field sizes differ: {} vs {}",
            field_now.len(),
            field_future.len()
        )));
    }
    if !(cell_area_km2 > 0.0) {
        return Err(Error::Validation("cell area must be positive".into()));
    }
    let sum: f64 = field_now
        .iter()
        .zip(field_future.iter())
        .map(|(a, b)| b - a)
        .sum();
    Ok(sum * cell_area_km2 * 1e6)
}

/// Fit the projection GP: center the response, then a zero-mean MLE fit.
pub fn fit_projection(design: &DesignMatrix, volume_change: &[f64]) -> Result<ProjectionEmulator> {
    if volume_change.len() != design.n_runs() {
        return Err(Error::Validation(
            "volume changes must match design rows".into(),
        ));
    }
    let mean = volume_change.iter().sum::<f64>() / volume_change.len() as f64;
    let centered: Vec<f64> = volume_change.iter().map(|v| v - mean).collect();
    let emulator = fit_mle_zero_mean(design, &centered)?;
    Ok(ProjectionEmulator {
        emulator,
        response_mean: mean,
    })
}

impl ProjectionEmulator {
    pub fn predict(&self, theta: &[f64]) -> Result<(f64, f64)> {
        let (m, v) = self.emulator.predict(theta, None)?;
        Ok((m + self.response_mean, v))
    }
}

/// Push a sample of input settings through the projection emulator. With
/// `include_emulator_noise` each output is a draw from the predictive
/// normal; otherwise it is the predictive mean (a deterministic map).
pub fn project_posterior(
    chain: &[Vec<f64>],
    proj: &ProjectionEmulator,
    include_emulator_noise: bool,
    seed: u64,
) -> Result<Vec<f64>> {
    if chain.is_empty() {
        return Err(Error::Validation("empty posterior sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(chain.len());
    for theta in chain {
        let (m, v) = proj.predict(theta)?;
        if include_emulator_noise {
            let z: f64 = StandardNormal.sample(&mut rng);
            out.push(m + v.max(0.0).sqrt() * z);
        } else {
            out.push(m);
        }
    }
    Ok(out)
}

/// Gaussian kernel-density evaluation on a regular grid, for plotting.
/// Bandwidth defaults to Silverman's rule when not given.
pub fn density_table(sample: &[f64], n_grid: usize, bandwidth: Option<f64>) -> Vec<(f64, f64)> {
    let n = sample.len();
    if n == 0 || n_grid == 0 {
        return Vec::new();
    }
    let mean = sample.iter().sum::<f64>() / n as f64;
    let sd = (sample.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let h = bandwidth.unwrap_or_else(|| (1.06 * sd * (n as f64).powf(-0.2)).max(1e-12));
    let lo = sample.iter().cloned().fold(f64::INFINITY, f64::min) - 3.0 * h;
    let hi = sample.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 3.0 * h;
    let norm = 1.0 / (n as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    (0..n_grid)
        .map(|g| {
            let x = if n_grid > 1 {
                lo + (hi - lo) * g as f64 / (n_grid - 1) as f64
            } else {
                0.5 * (lo + hi)
            };
            let dens: f64 = sample
                .iter()
                .map(|&s| (-0.5 * ((x - s) / h).powi(2)).exp())
                .sum::<f64>()
                * norm;
            (x, dens)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::DMatrix;
    use rand::Rng;

    #[test]
    fn identical_fields_give_zero_change() {
        let f = vec![1.0, 2.5, 0.0, 3.3];
        assert_eq!(volume_change_from_fields(&f, &f, 400.0).unwrap(), 0.0);
    }

    #[test]
    fn uniform_one_metre_change() {
        let now = vec![0.5; 30];
        let fut = vec![1.5; 30];
        let v = volume_change_from_fields(&now, &fut, 400.0).unwrap();
        assert_relative_eq!(v, 30.0 * 400.0 * 1e6, max_relative = 1e-12);
    }

    #[test]
    fn random_pair_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let now: Vec<f64> = (0..50).map(|_| rng.gen::<f64>() * 3.0).collect();
        let fut: Vec<f64> = (0..50).map(|_| rng.gen::<f64>() * 3.0).collect();
        let v = volume_change_from_fields(&now, &fut, 123.0).unwrap();
        let mut oracle = 0.0;
        for j in 0..50 {
            oracle += (fut[j] - now[j]) * 123.0 * 1e6;
        }
        assert_relative_eq!(v, oracle, max_relative = 1e-12);
    }

    fn random_design(n: usize, d: usize, seed: u64) -> DesignMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DesignMatrix::from_rows(DMatrix::from_fn(n, d, |_, _| rng.gen::<f64>())).unwrap()
    }

    #[test]
    fn constant_response_predicts_constant() {
        let design = random_design(12, 2, 3);
        let proj = fit_projection(&design, &vec![7.5; 12]).unwrap();
        for t in [[0.2, 0.8], [0.9, 0.1]] {
            let (m, _) = proj.predict(&t).unwrap();
            assert_relative_eq!(m, 7.5, epsilon = 1e-8);
        }
    }

    #[test]
    fn linear_response_emulated_well() {
        let design = random_design(60, 2, 5);
        let resp: Vec<f64> = (0..60)
            .map(|i| 10.0 + 4.0 * design.rows()[(i, 0)])
            .collect();
        let proj = fit_projection(&design, &resp).unwrap();
        let test = random_design(30, 2, 6);
        let mut sse = 0.0;
        for i in 0..30 {
            let t = test.run(i);
            let (m, _) = proj.predict(&t).unwrap();
            sse += (m - (10.0 + 4.0 * t[0])).powi(2);
        }
        let rmse = (sse / 30.0).sqrt();
        let sd = {
            let mean = resp.iter().sum::<f64>() / 60.0;
            (resp.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 60.0).sqrt()
        };
        assert!(rmse < 0.1 * sd, "rmse {rmse} vs sd {sd}");
    }

    #[test]
    fn single_state_chain_flag_off_is_constant() {
        let design = random_design(15, 2, 8);
        let resp: Vec<f64> = (0..15).map(|i| design.rows()[(i, 0)] * 2.0).collect();
        let proj = fit_projection(&design, &resp).unwrap();
        let theta = vec![0.44, 0.66];
        let out = project_posterior(&vec![theta.clone(); 5], &proj, false, 1).unwrap();
        let (m, _) = proj.predict(&theta).unwrap();
        for v in out {
            assert_eq!(v, m);
        }
    }

    #[test]
    fn noise_flag_changes_draws_deterministically() {
        let design = random_design(15, 2, 8);
        let resp: Vec<f64> = (0..15).map(|i| design.rows()[(i, 1)] * 3.0).collect();
        let proj = fit_projection(&design, &resp).unwrap();
        let chain: Vec<Vec<f64>> = (0..10).map(|i| vec![0.1 + 0.08 * i as f64, 0.5]).collect();
        let a = project_posterior(&chain, &proj, true, 7).unwrap();
        let b = project_posterior(&chain, &proj, true, 7).unwrap();
        assert_eq!(a, b);
        let c = project_posterior(&chain, &proj, false, 7).unwrap();
        assert_ne!(a, c);
        assert_eq!(c.len(), chain.len());
    }

    #[test]
    fn density_table_integrates_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let sample: Vec<f64> = (0..400)
            .map(|_| {
                let v: f64 = rand_distr::StandardNormal.sample(&mut rng);
                v
            })
            .collect();
        let table = density_table(&sample, 200, None);
        let dx = table[1].0 - table[0].0;
        let total: f64 = table.iter().map(|&(_, d)| d * dx).sum();
        assert!((total - 1.0).abs() < 0.02, "integral {total}");
    }
}
