//! Plain-text `key = value` run configuration shared by the CLI commands.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::calibration::Mode;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub ensemble: PathBuf,
    pub observation: PathBuf,
    pub grid: PathBuf,
    pub output_dir: PathBuf,
    /// Emulator bundle path; empty means `<output_dir>/emulator.bundle`.
    pub bundle: PathBuf,
    /// Chain file path; empty means `<output_dir>/chain.txt`.
    pub chain: PathBuf,
    /// Per-run projection responses (one value per ensemble run).
    pub volume_file: PathBuf,
    pub j_w: usize,
    pub j_u: usize,
    pub j_r: usize,
    pub n_knots: usize,
    pub kernel_range_km: f64,
    pub transform: String,
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub adapt_frac: f64,
    pub mode: Mode,
    pub seed: u64,
    pub holdout_frac: f64,
    /// usize::MAX selects the run farthest from the design centroid.
    pub truth_index: usize,
    pub contaminate_frac: f64,
    pub grf_sill: f64,
    pub grf_range_km: f64,
    pub grf_nugget: f64,
    /// 0 disables checkpointing.
    pub checkpoint_every: usize,
    pub include_emulator_noise: bool,
    pub density_grid: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            ensemble: PathBuf::new(),
            observation: PathBuf::new(),
            grid: PathBuf::new(),
            output_dir: PathBuf::new(),
            bundle: PathBuf::new(),
            chain: PathBuf::new(),
            volume_file: PathBuf::new(),
            j_w: 10,
            j_u: 20,
            j_r: 10,
            n_knots: 40,
            kernel_range_km: 400.0,
            transform: "q".into(),
            n_iter: 150_000,
            burn_in: 30_000,
            thin: 1,
            adapt_frac: 0.2,
            mode: Mode::Full,
            seed: 0,
            holdout_frac: 0.1,
            truth_index: usize::MAX,
            contaminate_frac: 0.3,
            grf_sill: 4.0,
            grf_range_km: 400.0,
            grf_nugget: 0.01,
            checkpoint_every: 0,
            include_emulator_noise: true,
            density_grid: 256,
        }
    }
}

fn parse_pairs(text: &str, origin: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::parse(origin, format!("line {}: expected `key = value`", lineno + 1))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(Error::parse(
                origin,
                format!("line {}: duplicate key `{key}`", lineno + 1),
            ));
        }
    }
    Ok(map)
}

impl RunConfig {
    pub fn from_str_named(text: &str, origin: &str) -> Result<Self> {
        let pairs = parse_pairs(text, origin)?;
        let mut cfg = RunConfig::default();
        let bad = |key: &str, value: &str| {
            Error::Config(format!("invalid value `{value}` for `{key}`"))
        };
        for (key, value) in &pairs {
            match key.as_str() {
                "ensemble" => cfg.ensemble = PathBuf::from(value),
                "observation" => cfg.observation = PathBuf::from(value),
                "grid" => cfg.grid = PathBuf::from(value),
                "output_dir" => cfg.output_dir = PathBuf::from(value),
                "bundle" => cfg.bundle = PathBuf::from(value),
                "chain" => cfg.chain = PathBuf::from(value),
                "volume_file" => cfg.volume_file = PathBuf::from(value),
                "j_w" => cfg.j_w = value.parse().map_err(|_| bad(key, value))?,
                "j_u" => cfg.j_u = value.parse().map_err(|_| bad(key, value))?,
                "j_r" => cfg.j_r = value.parse().map_err(|_| bad(key, value))?,
                "n_knots" => cfg.n_knots = value.parse().map_err(|_| bad(key, value))?,
                "kernel_range_km" => {
                    cfg.kernel_range_km = value.parse().map_err(|_| bad(key, value))?
                }
                "transform" => cfg.transform = value.clone(),
                "n_iter" => cfg.n_iter = value.parse().map_err(|_| bad(key, value))?,
                "burn_in" => cfg.burn_in = value.parse().map_err(|_| bad(key, value))?,
                "thin" => cfg.thin = value.parse().map_err(|_| bad(key, value))?,
                "adapt_frac" => cfg.adapt_frac = value.parse().map_err(|_| bad(key, value))?,
                "mode" => {
                    cfg.mode = match value.as_str() {
                        "full" => Mode::Full,
                        "binary-only" => Mode::BinaryOnly,
                        "prior-only" => Mode::PriorOnly,
                        _ => return Err(bad(key, value)),
                    }
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key, value))?,
                "holdout_frac" => {
                    cfg.holdout_frac = value.parse().map_err(|_| bad(key, value))?
                }
                "truth_index" => {
                    cfg.truth_index = if value == "auto" {
                        usize::MAX
                    } else {
                        value.parse().map_err(|_| bad(key, value))?
                    }
                }
                "contaminate_frac" => {
                    cfg.contaminate_frac = value.parse().map_err(|_| bad(key, value))?
                }
                "grf_sill" => cfg.grf_sill = value.parse().map_err(|_| bad(key, value))?,
                "grf_range_km" => {
                    cfg.grf_range_km = value.parse().map_err(|_| bad(key, value))?
                }
                "grf_nugget" => cfg.grf_nugget = value.parse().map_err(|_| bad(key, value))?,
                "checkpoint_every" => {
                    cfg.checkpoint_every = value.parse().map_err(|_| bad(key, value))?
                }
                "include_emulator_noise" => {
                    cfg.include_emulator_noise = match value.as_str() {
                        "true" | "1" | "yes" => true,
                        "false" | "0" | "no" => false,
                        _ => return Err(bad(key, value)),
                    }
                }
                "density_grid" => {
                    cfg.density_grid = value.parse().map_err(|_| bad(key, value))?
                }
                other => {
                    return Err(Error::Config(format!("unknown configuration key `{other}`")))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::from_str_named(&text, &path.display().to_string())
    }

    fn validate(&self) -> Result<()> {
        if self.transform != "q" {
            return Err(Error::Config(format!(
                "unsupported transform `{}` (only `q`)",
                self.transform
            )));
        }
        if self.j_w == 0 || self.j_u == 0 || self.j_r == 0 {
            return Err(Error::Config("J_w, J_u, J_r must be positive".into()));
        }
        if self.j_r > self.n_knots {
            return Err(Error::Config("J_r must not exceed the knot count".into()));
        }
        if !(self.kernel_range_km > 0.0) {
            return Err(Error::Config("kernel range must be positive".into()));
        }
        if !(self.holdout_frac > 0.0 && self.holdout_frac < 0.5) {
            return Err(Error::Config("holdout_frac must lie in (0, 0.5)".into()));
        }
        if !(self.contaminate_frac > 0.0 && self.contaminate_frac <= 1.0) {
            return Err(Error::Config("contaminate_frac must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.adapt_frac) {
            return Err(Error::Config("adapt_frac must lie in [0, 1]".into()));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::Config("burn_in must be below n_iter".into()));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be positive".into()));
        }
        Ok(())
    }

    pub fn bundle_path(&self) -> PathBuf {
        if self.bundle.as_os_str().is_empty() {
            self.output_dir.join("emulator.bundle")
        } else {
            self.bundle.clone()
        }
    }

    pub fn chain_path(&self) -> PathBuf {
        if self.chain.as_os_str().is_empty() {
            self.output_dir.join("chain.txt")
        } else {
            self.chain.clone()
        }
    }

    pub fn mode_name(&self) -> &'static str {
        match self.mode {
            Mode::Full => "full",
            Mode::BinaryOnly => "binary-only",
            Mode::PriorOnly => "prior-only",
        }
    }

    /// Resolved settings in a stable order, for the run manifest.
    pub fn manifest_lines(&self) -> Vec<String> {
        vec![
            format!("ensemble = {}", self.ensemble.display()),
            format!("observation = {}", self.observation.display()),
            format!("grid = {}", self.grid.display()),
            format!("output_dir = {}", self.output_dir.display()),
            format!("bundle = {}", self.bundle_path().display()),
            format!("chain = {}", self.chain_path().display()),
            format!("volume_file = {}", self.volume_file.display()),
            format!("j_w = {}", self.j_w),
            format!("j_u = {}", self.j_u),
            format!("j_r = {}", self.j_r),
            format!("n_knots = {}", self.n_knots),
            format!("kernel_range_km = {}", self.kernel_range_km),
            format!("transform = {}", self.transform),
            format!("n_iter = {}", self.n_iter),
            format!("burn_in = {}", self.burn_in),
            format!("thin = {}", self.thin),
            format!("adapt_frac = {}", self.adapt_frac),
            format!("mode = {}", self.mode_name()),
            format!("seed = {}", self.seed),
            format!("holdout_frac = {}", self.holdout_frac),
            format!(
                "truth_index = {}",
                if self.truth_index == usize::MAX {
                    "auto".to_string()
                } else {
                    self.truth_index.to_string()
                }
            ),
            format!("contaminate_frac = {}", self.contaminate_frac),
            format!("grf_sill = {}", self.grf_sill),
            format!("grf_range_km = {}", self.grf_range_km),
            format!("grf_nugget = {}", self.grf_nugget),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("include_emulator_noise = {}", self.include_emulator_noise),
            format!("density_grid = {}", self.density_grid),
        ]
    }
}
