//! Bayesian calibration: the factorized mixture likelihood over positive
//! observed values (Gaussian, low-rank) and the presence pattern
//! (Bernoulli), hierarchical priors, and a Metropolis-within-Gibbs
//! sampler with adaptive random-walk proposals.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use statrs::function::gamma::ln_gamma;

use crate::bases::{BinaryBasis, KernelBasis};
use crate::data::{inverse_q, ObservationField};
use crate::emulator::{ScorePrediction, SemiContinuousEmulator};
use crate::error::{Error, Result};
use crate::lowrank::LowRankCov;
use crate::lpca::log_sigmoid;

/// Relative floor applied to emulator predictive variances before they
/// enter a covariance diagonal.
const VAR_FLOOR_REL: f64 = 1e-12;
const N_BLOCKS: usize = 8;
const TARGET_ACCEPT: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Both likelihood factors.
    Full,
    /// Presence-pattern likelihood only.
    BinaryOnly,
    /// No likelihood; the chain samples the prior.
    PriorOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationState {
    pub theta_star: Vec<f64>,
    pub psi: DVector<f64>,
    pub v: DVector<f64>,
    pub sigma_r2: f64,
    pub sigma_eps2: f64,
    pub sigma_v2: f64,
    pub kappa_u: Vec<f64>,
    /// Cross-correlation between r and v coefficients, J_r x J_v.
    pub r: DMatrix<f64>,
}

/// Inverse-gamma hyperparameters as (shape, scale).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Priors {
    pub sigma_v2: (f64, f64),
    pub sigma_r2: (f64, f64),
    pub sigma_eps2: (f64, f64),
    /// kappa_u,j ~ IG(shape, scale_mult * kappa_hat_j).
    pub kappa_shape: f64,
    pub kappa_scale_mult: f64,
}

impl Default for Priors {
    fn default() -> Self {
        Priors {
            sigma_v2: (2.0, 1.0),
            sigma_r2: (2.0, 3.0),
            sigma_eps2: (10.0, 11000.0),
            kappa_shape: 5.0,
            kappa_scale_mult: 6.0,
        }
    }
}

/// Everything fixed during a calibration run: fitted emulator, observation,
/// discrepancy bases, priors, and likelihood mode.
pub struct CalibrationModel<'a> {
    pub emulator: &'a SemiContinuousEmulator,
    pub obs: &'a ObservationField,
    /// Ku rows at the positive observation cells, m x J_u.
    pub k_plus_u: DMatrix<f64>,
    /// Kernel basis at the positive observation cells, m x J_r.
    pub kr: DMatrix<f64>,
    /// Binary-mismatch basis, p x J_v.
    pub kv: DMatrix<f64>,
    /// Stacked [K_{+,u} K_r], m x (J_u + J_r).
    pub k_plus: DMatrix<f64>,
    /// Transformed positive observations, length m.
    pub h_plus: DVector<f64>,
    /// MLE partial sills of the u-track emulators.
    pub kappa_hat: Vec<f64>,
    pub priors: Priors,
    pub mode: Mode,
}

impl<'a> CalibrationModel<'a> {
    pub fn d(&self) -> usize {
        self.emulator.w_emulators[0].design.ncols()
    }

    pub fn j_w(&self) -> usize {
        self.emulator.j_w()
    }

    pub fn j_u(&self) -> usize {
        self.emulator.j_u()
    }

    pub fn j_r(&self) -> usize {
        self.kr.ncols()
    }

    pub fn j_v(&self) -> usize {
        self.kv.ncols()
    }
}

/// Assemble a calibration model from fitted parts; validates conformity
/// between the emulator, observation, and bases.
pub fn build_model<'a>(
    emulator: &'a SemiContinuousEmulator,
    obs: &'a ObservationField,
    kernel_basis: &KernelBasis,
    binary_basis: &BinaryBasis,
    priors: Priors,
    mode: Mode,
) -> Result<CalibrationModel<'a>> {
    let p = emulator.n_cells();
    if obs.n_cells() != p {
        return Err(Error::Validation(format!(
            "observation has {} cells, emulator {}",
            obs.n_cells(),
            p
        )));
    }
    let m = obs.n_positive();
    if m == 0 {
        return Err(Error::Validation(
            "observation has no positive cells; continuous likelihood undefined".into(),
        ));
    }
    if kernel_basis.kr.nrows() != m {
        return Err(Error::Validation(format!(
            "kernel basis has {} rows for {m} positive cells",
            kernel_basis.kr.nrows()
        )));
    }
    if binary_basis.kv.len() != p {
        return Err(Error::Validation("binary basis length mismatch".into()));
    }
    let j_u = emulator.j_u();
    let pos = &obs.positive_index()[..m];
    let k_plus_u = DMatrix::from_fn(m, j_u, |i, l| emulator.ppca.ku[(pos[i], l)]);
    let kr = kernel_basis.kr.clone();
    let kv = DMatrix::from_fn(p, 1, |j, _| binary_basis.kv[j]);
    let mut k_plus = DMatrix::zeros(m, j_u + kr.ncols());
    k_plus.columns_mut(0, j_u).copy_from(&k_plus_u);
    k_plus.columns_mut(j_u, kr.ncols()).copy_from(&kr);
    let h_plus = DVector::from_vec(
        obs.z_positive()
            .iter()
            .map(|&z| inverse_q(z))
            .collect::<Result<Vec<f64>>>()?,
    );
    let kappa_hat: Vec<f64> = emulator.u_emulators.iter().map(|e| e.cov.kappa).collect();
    Ok(CalibrationModel {
        emulator,
        obs,
        k_plus_u,
        kr,
        kv,
        k_plus,
        h_plus,
        kappa_hat,
        priors,
        mode,
    })
}

/// A neutral starting state: design-box midpoint, emulated LPC means,
/// prior modes for the variances, zero discrepancy coefficients.
pub fn init_state(model: &CalibrationModel) -> Result<CalibrationState> {
    let d = model.d();
    let theta = vec![0.5; d];
    let pred = model.emulator.predict_scores(&theta)?;
    let pm = &model.priors;
    Ok(CalibrationState {
        theta_star: theta,
        psi: DVector::from_vec(pred.psi_mean),
        v: DVector::zeros(model.j_v()),
        sigma_r2: pm.sigma_r2.1 / (pm.sigma_r2.0 + 1.0),
        sigma_eps2: pm.sigma_eps2.1 / (pm.sigma_eps2.0 + 1.0),
        sigma_v2: pm.sigma_v2.1 / (pm.sigma_v2.0 + 1.0),
        kappa_u: model.kappa_hat.clone(),
        r: DMatrix::zeros(model.j_r(), model.j_v()),
    })
}

/// Conditional moments of the continuous discrepancy coefficients given
/// the binary ones: mean (sigma_r/sigma_v) R v, covariance
/// sigma_r^2 (I - R R^T).
pub fn conditional_r_given_v(state: &CalibrationState) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if !(state.sigma_r2 > 0.0 && state.sigma_v2 > 0.0) {
        return Err(Error::Validation("variances must be positive".into()));
    }
    let j_r = state.r.nrows();
    let mut corr = DMatrix::identity(j_r, j_r) - &state.r * state.r.transpose();
    if corr.clone().cholesky().is_none() {
        return Err(Error::Validation(
            "I - R R^T is not positive definite".into(),
        ));
    }
    let scale = (state.sigma_r2 / state.sigma_v2).sqrt();
    let mean = &state.r * &state.v * scale;
    corr *= state.sigma_r2;
    Ok((mean, corr))
}

fn state_is_pd(state: &CalibrationState) -> bool {
    let j_r = state.r.nrows();
    let corr = DMatrix::identity(j_r, j_r) - &state.r * state.r.transpose();
    corr.cholesky().is_some()
}

/// Gaussian marginal log-likelihood of the transformed positive
/// observations, with r integrated out analytically.
pub fn loglik_continuous(model: &CalibrationModel, state: &CalibrationState) -> Result<f64> {
    let pred = model.emulator.predict_scores(&state.theta_star)?;
    Ok(loglik_continuous_with_pred(model, state, &pred))
}

fn loglik_continuous_with_pred(
    model: &CalibrationModel,
    state: &CalibrationState,
    pred: &ScorePrediction,
) -> f64 {
    let (mu_rv, sigma_rv) = match conditional_r_given_v(state) {
        Ok(x) => x,
        Err(_) => return f64::NEG_INFINITY,
    };
    let j_u = model.j_u();
    let j_r = model.j_r();
    let j = j_u + j_r;
    let mut core = DMatrix::zeros(j, j);
    for l in 0..j_u {
        let scaled = pred.xi_var[l] * state.kappa_u[l] / model.kappa_hat[l];
        core[(l, l)] = scaled.max(VAR_FLOOR_REL * state.kappa_u[l]);
    }
    core.view_mut((j_u, j_u), (j_r, j_r)).copy_from(&sigma_rv);
    let cov = match LowRankCov::new(model.k_plus.clone(), core, state.sigma_eps2) {
        Ok(c) => c,
        Err(_) => return f64::NEG_INFINITY,
    };
    let mu_xi = DVector::from_vec(pred.xi_mean.clone());
    let mu_plus = &model.k_plus_u * &mu_xi + &model.kr * &mu_rv;
    let resid = &model.h_plus - mu_plus;
    cov.loglik(&resid)
}

/// Bernoulli log-likelihood of the observed presence pattern under logits
/// mu + K_w psi + K_v v.
pub fn loglik_binary(model: &CalibrationModel, state: &CalibrationState) -> f64 {
    let lpca = &model.emulator.lpca;
    let lambda = &lpca.mu + &lpca.kw * &state.psi + &model.kv * &state.v;
    let mut ll = 0.0;
    for (j, &iz) in model.obs.presence().iter().enumerate() {
        ll += if iz > 0.5 {
            log_sigmoid(lambda[j])
        } else {
            log_sigmoid(-lambda[j])
        };
    }
    ll
}

fn log_inv_gamma(x: f64, shape: f64, scale: f64) -> f64 {
    if x <= 0.0 {
        return f64::NEG_INFINITY;
    }
    shape * scale.ln() - ln_gamma(shape) - (shape + 1.0) * x.ln() - scale / x
}

fn log_normal(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

/// Joint log-prior of the state, including the emulator-induced Gaussian
/// prior on psi at theta*.
pub fn log_prior(model: &CalibrationModel, state: &CalibrationState) -> Result<f64> {
    let pred = model.emulator.predict_scores(&state.theta_star)?;
    Ok(log_prior_with_pred(model, state, &pred))
}

fn log_prior_with_pred(
    model: &CalibrationModel,
    state: &CalibrationState,
    pred: &ScorePrediction,
) -> f64 {
    if state.theta_star.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return f64::NEG_INFINITY;
    }
    if !(state.sigma_r2 > 0.0 && state.sigma_eps2 > 0.0 && state.sigma_v2 > 0.0)
        || state.kappa_u.iter().any(|&k| k <= 0.0)
    {
        return f64::NEG_INFINITY;
    }
    if !state_is_pd(state) {
        return f64::NEG_INFINITY;
    }
    let pm = &model.priors;
    let mut lp = 0.0;
    lp += log_inv_gamma(state.sigma_v2, pm.sigma_v2.0, pm.sigma_v2.1);
    lp += log_inv_gamma(state.sigma_r2, pm.sigma_r2.0, pm.sigma_r2.1);
    lp += log_inv_gamma(state.sigma_eps2, pm.sigma_eps2.0, pm.sigma_eps2.1);
    for (l, &k) in state.kappa_u.iter().enumerate() {
        lp += log_inv_gamma(k, pm.kappa_shape, pm.kappa_scale_mult * model.kappa_hat[l]);
    }
    for a in 0..state.v.len() {
        lp += log_normal(state.v[a], 0.0, state.sigma_v2);
    }
    for k in 0..state.psi.len() {
        let kappa_w = model.emulator.w_emulators[k].cov.kappa;
        let var = pred.psi_var[k].max(VAR_FLOOR_REL * kappa_w.max(1e-300));
        lp += log_normal(state.psi[k], pred.psi_mean[k], var);
    }
    lp
}

/// Unnormalized log-posterior: continuous + binary log-likelihoods plus
/// the log-prior, with likelihood factors switched by the model mode.
pub fn log_posterior(model: &CalibrationModel, state: &CalibrationState) -> Result<f64> {
    let pred = model.emulator.predict_scores(&state.theta_star)?;
    Ok(log_posterior_with_pred(model, state, &pred))
}

fn log_posterior_with_pred(
    model: &CalibrationModel,
    state: &CalibrationState,
    pred: &ScorePrediction,
) -> f64 {
    let lp = log_prior_with_pred(model, state, pred);
    if lp == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    let mut total = lp;
    if model.mode != Mode::PriorOnly {
        total += loglik_binary(model, state);
    }
    if model.mode == Mode::Full {
        total += loglik_continuous_with_pred(model, state, pred);
    }
    total
}

#[derive(Debug, Clone)]
pub struct McmcConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub seed: u64,
    /// Fraction of iterations with Robbins-Monro step adaptation.
    pub adapt_frac: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        McmcConfig {
            n_iter: 150_000,
            burn_in: 30_000,
            thin: 1,
            seed: 0,
            adapt_frac: 0.2,
        }
    }
}

pub const BLOCK_NAMES: [&str; N_BLOCKS] = [
    "theta", "psi", "v", "sigma_v2", "sigma_r2", "sigma_eps2", "kappa_u", "R",
];

pub struct McmcChain {
    pub states: Vec<CalibrationState>,
    pub log_post: Vec<f64>,
    pub accept_rate: [f64; N_BLOCKS],
    pub seed: u64,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
}

impl McmcChain {
    /// Flattened parameter names in record order.
    pub fn param_names(&self) -> Vec<String> {
        let s = &self.states[0];
        let mut names = Vec::new();
        for i in 0..s.theta_star.len() {
            names.push(format!("theta{}", i + 1));
        }
        for k in 0..s.psi.len() {
            names.push(format!("psi{}", k + 1));
        }
        for a in 0..s.v.len() {
            names.push(format!("v{}", a + 1));
        }
        names.push("sigma_v2".into());
        names.push("sigma_r2".into());
        names.push("sigma_eps2".into());
        for l in 0..s.kappa_u.len() {
            names.push(format!("kappa_u{}", l + 1));
        }
        for c in 0..s.r.ncols() {
            for rr in 0..s.r.nrows() {
                names.push(format!("R{}_{}", rr + 1, c + 1));
            }
        }
        names
    }

    pub fn flatten(state: &CalibrationState) -> Vec<f64> {
        let mut row = state.theta_star.clone();
        row.extend(state.psi.iter());
        row.extend(state.v.iter());
        row.push(state.sigma_v2);
        row.push(state.sigma_r2);
        row.push(state.sigma_eps2);
        row.extend(state.kappa_u.iter());
        row.extend(state.r.iter());
        row
    }

    /// Kept-sample series of one flattened parameter.
    pub fn series(&self, idx: usize) -> Vec<f64> {
        self.states.iter().map(|s| Self::flatten(s)[idx]).collect()
    }
}

/// Sampler snapshot for checkpoint/resume: everything needed to continue
/// a chain bit-identically.
#[derive(Debug, Clone)]
pub struct SamplerSnapshot {
    pub state: CalibrationState,
    pub steps: [f64; N_BLOCKS],
    pub acc: [u64; N_BLOCKS],
    pub prop: [u64; N_BLOCKS],
    pub iter: usize,
    pub rng_word_pos: u128,
}

pub struct Sampler<'a, 'b> {
    model: &'a CalibrationModel<'b>,
    cfg: McmcConfig,
    state: CalibrationState,
    pred: ScorePrediction,
    log_post: f64,
    steps: [f64; N_BLOCKS],
    acc: [u64; N_BLOCKS],
    prop: [u64; N_BLOCKS],
    iter: usize,
    rng: ChaCha8Rng,
    kept: Vec<CalibrationState>,
    kept_log_post: Vec<f64>,
}

impl<'a, 'b> Sampler<'a, 'b> {
    pub fn new(
        model: &'a CalibrationModel<'b>,
        init: CalibrationState,
        cfg: McmcConfig,
    ) -> Result<Self> {
        if cfg.burn_in >= cfg.n_iter {
            return Err(Error::Config(format!(
                "burn-in {} must be below the iteration count {}",
                cfg.burn_in, cfg.n_iter
            )));
        }
        if cfg.thin == 0 {
            return Err(Error::Config("thinning interval must be positive".into()));
        }
        let pred = model.emulator.predict_scores(&init.theta_star)?;
        let log_post = log_posterior_with_pred(model, &init, &pred);
        if !log_post.is_finite() {
            return Err(Error::Config(
                "initial state has non-finite log-posterior".into(),
            ));
        }
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Sampler {
            model,
            cfg,
            state: init,
            pred,
            log_post,
            steps: [0.05, 0.5, 0.5, 0.0, 0.5, 0.3, 0.3, 0.1],
            acc: [0; N_BLOCKS],
            prop: [0; N_BLOCKS],
            iter: 0,
            rng,
            kept: Vec::new(),
            kept_log_post: Vec::new(),
        })
    }

    pub fn iteration(&self) -> usize {
        self.iter
    }

    pub fn is_done(&self) -> bool {
        self.iter >= self.cfg.n_iter
    }

    pub fn state(&self) -> &CalibrationState {
        &self.state
    }

    pub fn cached_log_post(&self) -> f64 {
        self.log_post
    }

    pub fn snapshot(&self) -> SamplerSnapshot {
        SamplerSnapshot {
            state: self.state.clone(),
            steps: self.steps,
            acc: self.acc,
            prop: self.prop,
            iter: self.iter,
            rng_word_pos: self.rng.get_word_pos(),
        }
    }

    /// Restore sampler position from a snapshot taken with the same model
    /// and config (the kept-sample buffer restarts empty; callers persist
    /// kept samples separately).
    pub fn restore(&mut self, snap: SamplerSnapshot) -> Result<()> {
        let pred = self.model.emulator.predict_scores(&snap.state.theta_star)?;
        self.log_post = log_posterior_with_pred(self.model, &snap.state, &pred);
        self.pred = pred;
        self.state = snap.state;
        self.steps = snap.steps;
        self.acc = snap.acc;
        self.prop = snap.prop;
        self.iter = snap.iter;
        self.rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        self.rng.set_word_pos(snap.rng_word_pos);
        Ok(())
    }

    fn adapting(&self) -> bool {
        (self.iter as f64) < self.cfg.adapt_frac * self.cfg.n_iter as f64
    }

    fn adapt(&mut self, block: usize, accepted: bool) {
        if !self.adapting() {
            return;
        }
        let gamma = (self.iter as f64 + 1.0).powf(-0.6);
        let delta = if accepted {
            1.0 - TARGET_ACCEPT
        } else {
            -TARGET_ACCEPT
        };
        self.steps[block] = (self.steps[block].ln() + gamma * delta).exp().clamp(1e-6, 50.0);
    }

    /// Generic MH accept step for proposals not moving theta*.
    /// `log_q_correction` is log q(y->x) - log q(x->y).
    fn mh_accept(&mut self, block: usize, proposal: CalibrationState, log_q_correction: f64) {
        self.prop[block] += 1;
        let new_lp = log_posterior_with_pred(self.model, &proposal, &self.pred);
        let log_ratio = new_lp - self.log_post + log_q_correction;
        let accepted = log_ratio >= 0.0 || self.rng.gen::<f64>().ln() < log_ratio;
        if accepted {
            self.state = proposal;
            self.log_post = new_lp;
            self.acc[block] += 1;
        }
        self.adapt(block, accepted);
    }

    fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    fn update_theta(&mut self) {
        let d = self.state.theta_star.len();
        let mut proposal = self.state.clone();
        for c in 0..d {
            proposal.theta_star[c] += self.steps[0] * self.normal();
        }
        self.prop[0] += 1;
        if proposal.theta_star.iter().any(|t| !(0.0..=1.0).contains(t)) {
            self.adapt(0, false);
            return;
        }
        let new_pred = match self.model.emulator.predict_scores(&proposal.theta_star) {
            Ok(p) => p,
            Err(_) => {
                self.adapt(0, false);
                return;
            }
        };
        let new_lp = log_posterior_with_pred(self.model, &proposal, &new_pred);
        let log_ratio = new_lp - self.log_post;
        let accepted = log_ratio >= 0.0 || self.rng.gen::<f64>().ln() < log_ratio;
        if accepted {
            self.state = proposal;
            self.pred = new_pred;
            self.log_post = new_lp;
            self.acc[0] += 1;
        }
        self.adapt(0, accepted);
    }

    fn update_psi(&mut self) {
        let j_w = self.state.psi.len();
        let mut proposal = self.state.clone();
        for k in 0..j_w {
            let kappa_w = self.model.emulator.w_emulators[k].cov.kappa;
            let sd = self.pred.psi_var[k]
                .max(VAR_FLOOR_REL * kappa_w.max(1e-300))
                .sqrt();
            proposal.psi[k] += self.steps[1] * sd * self.normal();
        }
        self.mh_accept(1, proposal, 0.0);
    }

    fn update_v(&mut self) {
        let mut proposal = self.state.clone();
        for a in 0..proposal.v.len() {
            proposal.v[a] += self.steps[2] * self.normal();
        }
        self.mh_accept(2, proposal, 0.0);
    }

    fn update_sigma_v2(&mut self) {
        self.state.sigma_v2 = draw_sigma_v2(self.model.priors.sigma_v2, &self.state.v, &mut self.rng);
        self.prop[3] += 1;
        self.acc[3] += 1;
        self.log_post = log_posterior_with_pred(self.model, &self.state, &self.pred);
    }

    fn update_sigma_r2(&mut self) {
        let mut proposal = self.state.clone();
        let z = self.normal();
        proposal.sigma_r2 = self.state.sigma_r2 * (self.steps[4] * z).exp();
        let corr = (proposal.sigma_r2 / self.state.sigma_r2).ln();
        self.mh_accept(4, proposal, corr);
    }

    fn update_sigma_eps2(&mut self) {
        let mut proposal = self.state.clone();
        let z = self.normal();
        proposal.sigma_eps2 = self.state.sigma_eps2 * (self.steps[5] * z).exp();
        let corr = (proposal.sigma_eps2 / self.state.sigma_eps2).ln();
        self.mh_accept(5, proposal, corr);
    }

    fn update_kappa_u(&mut self) {
        let mut proposal = self.state.clone();
        let mut corr = 0.0;
        for l in 0..proposal.kappa_u.len() {
            let z = self.normal();
            proposal.kappa_u[l] = self.state.kappa_u[l] * (self.steps[6] * z).exp();
            corr += (proposal.kappa_u[l] / self.state.kappa_u[l]).ln();
        }
        self.mh_accept(6, proposal, corr);
    }

    fn update_r(&mut self) {
        let mut proposal = self.state.clone();
        for val in proposal.r.iter_mut() {
            *val += self.steps[7] * self.normal();
        }
        self.mh_accept(7, proposal, 0.0);
    }

    /// One full Metropolis-within-Gibbs sweep.
    pub fn step(&mut self) {
        self.update_theta();
        self.update_psi();
        self.update_v();
        self.update_sigma_v2();
        self.update_sigma_r2();
        self.update_sigma_eps2();
        self.update_kappa_u();
        self.update_r();
        self.iter += 1;
        if self.iter > self.cfg.burn_in && (self.iter - self.cfg.burn_in - 1) % self.cfg.thin == 0
        {
            self.kept.push(self.state.clone());
            self.kept_log_post.push(self.log_post);
        }
    }

    pub fn accept_rates(&self) -> [f64; N_BLOCKS] {
        let mut rates = [0.0; N_BLOCKS];
        for b in 0..N_BLOCKS {
            if self.prop[b] > 0 {
                rates[b] = self.acc[b] as f64 / self.prop[b] as f64;
            }
        }
        rates
    }

    pub fn take_kept(&mut self) -> (Vec<CalibrationState>, Vec<f64>) {
        (
            std::mem::take(&mut self.kept),
            std::mem::take(&mut self.kept_log_post),
        )
    }

    pub fn into_chain(mut self) -> McmcChain {
        let rates = self.accept_rates();
        let (states, log_post) = self.take_kept();
        McmcChain {
            states,
            log_post,
            accept_rate: rates,
            seed: self.cfg.seed,
            n_iter: self.cfg.n_iter,
            burn_in: self.cfg.burn_in,
            thin: self.cfg.thin,
        }
    }
}

/// Conjugate inverse-gamma draw of sigma_v2 from its full conditional given
/// v: IG(shape + J_v/2, scale + ||v||^2/2).
pub fn draw_sigma_v2(prior: (f64, f64), v: &DVector<f64>, rng: &mut ChaCha8Rng) -> f64 {
    let shape = prior.0 + v.len() as f64 / 2.0;
    let scale = prior.1 + 0.5 * v.norm_squared();
    let gamma = Gamma::new(shape, 1.0 / scale).expect("valid gamma parameters");
    let draw: f64 = gamma.sample(rng);
    1.0 / draw
}

/// Run a full chain in one call.
pub fn run_mcmc(
    model: &CalibrationModel,
    init: CalibrationState,
    cfg: McmcConfig,
) -> Result<McmcChain> {
    let mut sampler = Sampler::new(model, init, cfg)?;
    while !sampler.is_done() {
        sampler.step();
    }
    Ok(sampler.into_chain())
}

#[derive(Debug, Clone)]
pub struct ParamDiagnostics {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub mean_first_half: f64,
    pub q025: f64,
    pub q975: f64,
    pub ess: f64,
    pub degenerate: bool,
}

#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub params: Vec<ParamDiagnostics>,
    pub accept_rate: [f64; N_BLOCKS],
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let i = pos.floor() as usize;
    let frac = pos - i as f64;
    if i + 1 < n {
        sorted[i] * (1.0 - frac) + sorted[i + 1] * frac
    } else {
        sorted[i]
    }
}

/// Effective sample size by Geyer's initial positive sequence estimator;
/// the flag marks a (near-)constant series.
pub fn effective_sample_size(x: &[f64]) -> (f64, bool) {
    let n = x.len();
    if n < 4 {
        return (n as f64, true);
    }
    let mean = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if var < 1e-300 {
        return (f64::NAN, true);
    }
    let autocov = |lag: usize| -> f64 {
        (0..n - lag)
            .map(|i| (x[i] - mean) * (x[i + lag] - mean))
            .sum::<f64>()
            / n as f64
    };
    let mut sum_rho = 0.0;
    let mut lag = 1;
    while lag + 1 < n {
        let pair = autocov(lag) + autocov(lag + 1);
        if pair <= 0.0 {
            break;
        }
        sum_rho += pair / var;
        lag += 2;
    }
    let ess = n as f64 / (1.0 + 2.0 * sum_rho);
    (ess.min(n as f64), false)
}

/// First-half versus full-chain summary per flattened parameter.
pub fn chain_diagnostics(chain: &McmcChain) -> Result<DiagnosticsReport> {
    if chain.states.is_empty() {
        return Err(Error::Validation("empty chain".into()));
    }
    let names = chain.param_names();
    let mut params = Vec::with_capacity(names.len());
    for (idx, name) in names.into_iter().enumerate() {
        let series = chain.series(idx);
        let n = series.len();
        let mean = series.iter().sum::<f64>() / n as f64;
        let sd = (series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
        let half = &series[..(n / 2).max(1)];
        let mean_half = half.iter().sum::<f64>() / half.len() as f64;
        let mut sorted = series.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let (ess, degenerate) = effective_sample_size(&series);
        if degenerate {
            eprintln!("warning: parameter {name} has a degenerate chain");
        }
        params.push(ParamDiagnostics {
            name,
            mean,
            sd,
            mean_first_half: mean_half,
            q025: quantile(&sorted, 0.025),
            q975: quantile(&sorted, 0.975),
            ess,
            degenerate,
        });
    }
    Ok(DiagnosticsReport {
        params,
        accept_rate: chain.accept_rate,
    })
}
