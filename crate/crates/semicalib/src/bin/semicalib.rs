//! Pipeline driver: emulate, validate, synth, calibrate, project.
//!
//! Every command resolves a `key = value` configuration file (plus flag
//! overrides), writes a `run.manifest` with the resolved settings and
//! SHA-256 hashes of its inputs, and emits plain-text tables. Exit codes:
//! 0 success, 2 input error, 3 numerical failure.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use sha2::{Digest, Sha256};

use semicalib::bases::{build_kr, build_kv};
use semicalib::calibration::{
    build_model, chain_diagnostics, init_state, CalibrationModel, CalibrationState, McmcChain,
    McmcConfig, Mode, Priors, Sampler, SamplerSnapshot, BLOCK_NAMES,
};
use semicalib::config::RunConfig;
use semicalib::data::{read_ensemble_text, read_grid, read_observation, write_observation};
use semicalib::emulator::{
    cross_validate, fit_emulator, read_bundle, write_bundle, SemiContinuousEmulator,
};
use semicalib::projection::{density_table, fit_projection, project_posterior};
use semicalib::synthetic::{make_scenario, rank_by_centroid_distance, GrfParams};
use semicalib::{Error, Result};

#[derive(Parser)]
#[command(name = "semicalib", version, about = "Emulation and calibration of semi-continuous spatial model output")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`key = value` lines).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the emulator and write the model bundle.
    Emulate {
        #[command(flatten)]
        common: Common,
    },
    /// Hold-out cross-validation of the emulator.
    Validate {
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic contaminated observation from the ensemble.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Override the truth run index (default: farthest from centroid).
        #[arg(long)]
        truth_index: Option<usize>,
    },
    /// Run the MCMC calibration and write chain + diagnostics files.
    Calibrate {
        #[command(flatten)]
        common: Common,
        /// Resume from the latest checkpoint instead of starting fresh.
        #[arg(long)]
        resume: bool,
        /// Number of independent seeded chains.
        #[arg(long, default_value_t = 1)]
        chains: usize,
        #[arg(long)]
        n_iter: Option<usize>,
        #[arg(long)]
        burn_in: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<usize>,
        /// Likelihood mode: full | binary-only | prior-only.
        #[arg(long)]
        mode: Option<String>,
    },
    /// Push a posterior chain through the volume-change emulator.
    Project {
        #[command(flatten)]
        common: Common,
        /// Override the chain file to project.
        #[arg(long)]
        chain: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Numerical(_) | Error::Fit { .. } | Error::Domain(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Emulate { common } => cmd_emulate(load_config(&common)?),
        Command::Validate { common } => cmd_validate(load_config(&common)?),
        Command::Synth {
            common,
            truth_index,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(t) = truth_index {
                cfg.truth_index = t;
            }
            cmd_synth(cfg)
        }
        Command::Calibrate {
            common,
            resume,
            chains,
            n_iter,
            burn_in,
            checkpoint_every,
            mode,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(v) = n_iter {
                cfg.n_iter = v;
            }
            if let Some(v) = burn_in {
                cfg.burn_in = v;
            }
            if let Some(v) = checkpoint_every {
                cfg.checkpoint_every = v;
            }
            if let Some(m) = mode {
                cfg.mode = match m.as_str() {
                    "full" => Mode::Full,
                    "binary-only" => Mode::BinaryOnly,
                    "prior-only" => Mode::PriorOnly,
                    _ => return Err(Error::Config(format!("unknown mode `{m}`"))),
                };
            }
            if cfg.burn_in >= cfg.n_iter {
                return Err(Error::Config("burn_in must be below n_iter".into()));
            }
            if chains == 0 {
                return Err(Error::Config("chain count must be positive".into()));
            }
            cmd_calibrate(cfg, resume, chains)
        }
        Command::Project { common, chain } => {
            let mut cfg = load_config(&common)?;
            if let Some(c) = chain {
                cfg.chain = c;
            }
            cmd_project(cfg)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::from_file(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(d) = &common.output_dir {
        cfg.output_dir = d.clone();
    }
    if cfg.output_dir.as_os_str().is_empty() {
        return Err(Error::Config("output_dir must be set".into()));
    }
    fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| Error::io(cfg.output_dir.display().to_string(), e))?;
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_manifest(cfg: &RunConfig, command: &str, inputs: &[&Path]) -> Result<()> {
    let mut out = format!("command = {command}\n");
    for line in cfg.manifest_lines() {
        out.push_str(&line);
        out.push('\n');
    }
    for path in inputs {
        out.push_str(&format!("input {} sha256 {}\n", path.display(), sha256_file(path)?));
    }
    write_text(&cfg.output_dir.join("run.manifest"), &out)
}

fn cmd_emulate(cfg: RunConfig) -> Result<()> {
    let (design, ensemble) = read_ensemble_text(&cfg.ensemble)?;
    write_manifest(&cfg, "emulate", &[&cfg.ensemble])?;
    let emulator = fit_emulator(&ensemble, &design, cfg.j_w, cfg.j_u)?;
    let bundle = cfg.bundle_path();
    write_bundle(&bundle, &emulator)?;
    let report = format!(
        "n_runs = {}\nn_cells = {}\nj_w = {}\nj_u = {}\nbundle = {}\n",
        design.n_runs(),
        ensemble.n_cells(),
        emulator.j_w(),
        emulator.j_u(),
        bundle.display()
    );
    write_text(&cfg.output_dir.join("emulate_report.txt"), &report)
}

fn cmd_validate(cfg: RunConfig) -> Result<()> {
    let (design, ensemble) = read_ensemble_text(&cfg.ensemble)?;
    write_manifest(&cfg, "validate", &[&cfg.ensemble])?;
    let report = cross_validate(
        &ensemble,
        &design,
        cfg.j_w,
        cfg.j_u,
        cfg.holdout_frac,
        cfg.seed,
    )?;
    let text = format!(
        "mae_m = {:.17e}\nsensitivity = {:.17e}\nspecificity = {:.17e}\nn_holdout = {}\n",
        report.mae_m, report.sensitivity, report.specificity, report.n_holdout
    );
    write_text(&cfg.output_dir.join("validate_report.txt"), &text)
}

fn cmd_synth(cfg: RunConfig) -> Result<()> {
    let (design, ensemble) = read_ensemble_text(&cfg.ensemble)?;
    let grid = read_grid(&cfg.grid)?;
    write_manifest(&cfg, "synth", &[&cfg.ensemble, &cfg.grid])?;
    let truth_index = if cfg.truth_index == usize::MAX {
        rank_by_centroid_distance(&design)[0]
    } else {
        cfg.truth_index
    };
    let scenario = make_scenario(
        &ensemble,
        &design,
        grid.coords(),
        truth_index,
        cfg.contaminate_frac,
        GrfParams {
            sill: cfg.grf_sill,
            range_km: cfg.grf_range_km,
            nugget: cfg.grf_nugget,
        },
        cfg.seed,
    )?;
    write_observation(
        &cfg.output_dir.join("observation.txt"),
        scenario.contaminated_obs.z(),
    )?;
    let theta: Vec<String> = scenario
        .true_theta
        .iter()
        .map(|t| format!("{t:.17e}"))
        .collect();
    let truth = format!(
        "truth_index = {}\nseed = {}\ntheta = {}\n",
        truth_index,
        scenario.seed,
        theta.join(" ")
    );
    write_text(&cfg.output_dir.join("truth.txt"), &truth)
}

fn load_or_fit_emulator(cfg: &RunConfig) -> Result<SemiContinuousEmulator> {
    let bundle = cfg.bundle_path();
    if bundle.is_file() {
        return read_bundle(&bundle);
    }
    let (design, ensemble) = read_ensemble_text(&cfg.ensemble)?;
    let emulator = fit_emulator(&ensemble, &design, cfg.j_w, cfg.j_u)?;
    write_bundle(&bundle, &emulator)?;
    Ok(emulator)
}

struct ChainFiles {
    chain: PathBuf,
    checkpoint: PathBuf,
    diagnostics: PathBuf,
}

fn chain_files(cfg: &RunConfig, chain_idx: usize, n_chains: usize) -> ChainFiles {
    let chain = if n_chains == 1 {
        cfg.chain_path()
    } else {
        cfg.output_dir.join(format!("chain_{}.txt", chain_idx + 1))
    };
    let mut ckpt = chain.as_os_str().to_owned();
    ckpt.push(".ckpt");
    let diagnostics = if n_chains == 1 {
        cfg.output_dir.join("diagnostics.txt")
    } else {
        cfg.output_dir
            .join(format!("diagnostics_{}.txt", chain_idx + 1))
    };
    ChainFiles {
        chain,
        checkpoint: PathBuf::from(ckpt),
        diagnostics,
    }
}

fn cmd_calibrate(cfg: RunConfig, resume: bool, n_chains: usize) -> Result<()> {
    let (design, ensemble) = read_ensemble_text(&cfg.ensemble)?;
    let obs = read_observation(&cfg.observation)?;
    let grid = read_grid(&cfg.grid)?;
    let mut inputs: Vec<&Path> = vec![&cfg.ensemble, &cfg.observation, &cfg.grid];
    let bundle = cfg.bundle_path();
    let emulator = load_or_fit_emulator(&cfg)?;
    if bundle.is_file() {
        inputs.push(&bundle);
    }
    write_manifest(&cfg, "calibrate", &inputs)?;
    drop(design);
    if ensemble.n_cells() != obs.n_cells() || grid.n_cells() != obs.n_cells() {
        return Err(Error::Validation(format!(
            "cell counts disagree: ensemble {}, observation {}, grid {}",
            ensemble.n_cells(),
            obs.n_cells(),
            grid.n_cells()
        )));
    }
    let kernel = build_kr(
        &grid,
        &obs.positive_index()[..obs.n_positive()],
        cfg.n_knots,
        cfg.kernel_range_km,
        cfg.j_r,
    )?;
    let binary = build_kv(ensemble.presence(), obs.presence())?;
    let model = build_model(
        &emulator,
        &obs,
        &kernel,
        &binary,
        Priors::default(),
        cfg.mode,
    )?;
    let init = init_state(&model)?;

    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..n_chains)
            .map(|c| {
                let model = &model;
                let cfg = &cfg;
                let init = init.clone();
                scope.spawn(move || run_one_chain(cfg, model, init, c, n_chains, resume))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    for r in results {
        r?;
    }
    Ok(())
}

fn run_one_chain(
    cfg: &RunConfig,
    model: &CalibrationModel,
    init: CalibrationState,
    chain_idx: usize,
    n_chains: usize,
    resume: bool,
) -> Result<()> {
    let files = chain_files(cfg, chain_idx, n_chains);
    let mcmc = McmcConfig {
        n_iter: cfg.n_iter,
        burn_in: cfg.burn_in,
        thin: cfg.thin,
        seed: cfg.seed.wrapping_add(chain_idx as u64),
        adapt_frac: cfg.adapt_frac,
    };
    let mut sampler = Sampler::new(model, init, mcmc)?;
    let names = chain_header(model);
    let mut rows_written: usize = 0;

    if resume && files.checkpoint.is_file() {
        let (snap, rows) = read_checkpoint(&files.checkpoint, model)?;
        sampler.restore(snap)?;
        rows_written = rows;
        truncate_chain_file(&files.chain, &names, rows_written)?;
    } else {
        write_text(&files.chain, &format!("{}\n", names.join(" ")))?;
    }

    while !sampler.is_done() {
        sampler.step();
        if cfg.checkpoint_every > 0 && sampler.iteration() % cfg.checkpoint_every == 0 {
            rows_written += flush_kept(&files.chain, &mut sampler)?;
            write_checkpoint(&files.checkpoint, &sampler.snapshot(), rows_written)?;
        }
    }
    flush_kept(&files.chain, &mut sampler)?;

    let chain = read_chain_file(&files.chain, model, &mcmc_of(cfg, chain_idx))?;
    let chain = McmcChain {
        accept_rate: sampler.accept_rates(),
        ..chain
    };
    let report = chain_diagnostics(&chain)?;
    let mut text = String::new();
    for (b, name) in BLOCK_NAMES.iter().enumerate() {
        text.push_str(&format!("accept {} {:.6}\n", name, report.accept_rate[b]));
    }
    text.push_str("param mean sd mean_first_half q025 q975 ess\n");
    for p in &report.params {
        text.push_str(&format!(
            "{} {:.10e} {:.10e} {:.10e} {:.10e} {:.10e} {:.4}\n",
            p.name, p.mean, p.sd, p.mean_first_half, p.q025, p.q975, p.ess
        ));
    }
    write_text(&files.diagnostics, &text)
}

fn mcmc_of(cfg: &RunConfig, chain_idx: usize) -> McmcConfig {
    McmcConfig {
        n_iter: cfg.n_iter,
        burn_in: cfg.burn_in,
        thin: cfg.thin,
        seed: cfg.seed.wrapping_add(chain_idx as u64),
        adapt_frac: cfg.adapt_frac,
    }
}

fn chain_header(model: &CalibrationModel) -> Vec<String> {
    // same flattening order as McmcChain::param_names, plus log_post
    let mut names = Vec::new();
    for i in 0..model.d() {
        names.push(format!("theta{}", i + 1));
    }
    for k in 0..model.j_w() {
        names.push(format!("psi{}", k + 1));
    }
    for a in 0..model.j_v() {
        names.push(format!("v{}", a + 1));
    }
    names.push("sigma_v2".into());
    names.push("sigma_r2".into());
    names.push("sigma_eps2".into());
    for l in 0..model.j_u() {
        names.push(format!("kappa_u{}", l + 1));
    }
    for c in 0..model.j_v() {
        for rr in 0..model.j_r() {
            names.push(format!("R{}_{}", rr + 1, c + 1));
        }
    }
    names.push("log_post".into());
    names
}

fn flush_kept(chain_path: &Path, sampler: &mut Sampler) -> Result<usize> {
    let (states, log_post) = sampler.take_kept();
    if states.is_empty() {
        return Ok(0);
    }
    let mut out = String::new();
    for (s, lp) in states.iter().zip(log_post.iter()) {
        let mut row = McmcChain::flatten(s);
        row.push(*lp);
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.17e}")).collect();
        out.push_str(&cells.join(" "));
        out.push('\n');
    }
    use std::io::Write;
    let mut f = fs::OpenOptions::new()
        .append(true)
        .open(chain_path)
        .map_err(|e| Error::io(chain_path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(chain_path.display().to_string(), e))?;
    Ok(states.len())
}

fn truncate_chain_file(path: &Path, names: &[String], rows: usize) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path.display().to_string(), "empty chain file"))?;
    if header != names.join(" ") {
        return Err(Error::parse(
            path.display().to_string(),
            "chain header does not match the model",
        ));
    }
    let kept: Vec<&str> = lines.take(rows).collect();
    if kept.len() < rows {
        return Err(Error::parse(
            path.display().to_string(),
            format!("chain has {} rows, checkpoint expects {rows}", kept.len()),
        ));
    }
    let mut out = String::from(header);
    out.push('\n');
    for line in kept {
        out.push_str(line);
        out.push('\n');
    }
    write_text(path, &out)
}

const CKPT_MAGIC: &str = "semicalib-checkpoint v1";

fn push_bits(out: &mut String, label: &str, values: &[f64]) {
    out.push_str(label);
    for v in values {
        out.push_str(&format!(" {:016x}", v.to_bits()));
    }
    out.push('\n');
}

fn write_checkpoint(path: &Path, snap: &SamplerSnapshot, rows_written: usize) -> Result<()> {
    let mut out = format!("{CKPT_MAGIC}\n");
    out.push_str(&format!("iter {}\n", snap.iter));
    out.push_str(&format!("rows {rows_written}\n"));
    out.push_str(&format!("rng_word_pos {}\n", snap.rng_word_pos));
    push_bits(&mut out, "steps", &snap.steps);
    out.push_str("acc");
    for a in snap.acc {
        out.push_str(&format!(" {a}"));
    }
    out.push_str("\nprop");
    for p in snap.prop {
        out.push_str(&format!(" {p}"));
    }
    out.push('\n');
    let s = &snap.state;
    push_bits(&mut out, "theta", &s.theta_star);
    push_bits(&mut out, "psi", s.psi.as_slice());
    push_bits(&mut out, "v", s.v.as_slice());
    push_bits(
        &mut out,
        "scalars",
        &[s.sigma_v2, s.sigma_r2, s.sigma_eps2],
    );
    push_bits(&mut out, "kappa_u", &s.kappa_u);
    push_bits(&mut out, "R", s.r.as_slice());
    let tmp = path.with_extension("ckpt.tmp");
    write_text(&tmp, &out)?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

struct CkptReader<'a> {
    path: String,
    lines: std::str::Lines<'a>,
}

impl<'a> CkptReader<'a> {
    fn line(&mut self, label: &str) -> Result<Vec<&'a str>> {
        let line = self
            .lines
            .next()
            .ok_or_else(|| Error::parse(&*self.path, format!("missing `{label}` line")))?;
        let mut toks = line.split_whitespace();
        if toks.next() != Some(label) {
            return Err(Error::parse(&*self.path, format!("expected `{label}` line")));
        }
        Ok(toks.collect())
    }

    fn floats(&mut self, label: &str, n: usize) -> Result<Vec<f64>> {
        let toks = self.line(label)?;
        if toks.len() != n {
            return Err(Error::parse(
                &*self.path,
                format!("`{label}` needs {n} values, found {}", toks.len()),
            ));
        }
        toks.iter()
            .map(|t| {
                u64::from_str_radix(t, 16)
                    .map(f64::from_bits)
                    .map_err(|_| Error::parse(&*self.path, format!("bad hex float `{t}`")))
            })
            .collect()
    }

    fn ints(&mut self, label: &str, n: usize) -> Result<Vec<u64>> {
        let toks = self.line(label)?;
        if toks.len() != n {
            return Err(Error::parse(
                &*self.path,
                format!("`{label}` needs {n} values, found {}", toks.len()),
            ));
        }
        toks.iter()
            .map(|t| {
                t.parse::<u64>()
                    .map_err(|_| Error::parse(&*self.path, format!("bad integer `{t}`")))
            })
            .collect()
    }
}

fn read_checkpoint(path: &Path, model: &CalibrationModel) -> Result<(SamplerSnapshot, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    if lines.next() != Some(CKPT_MAGIC) {
        return Err(Error::parse(
            path.display().to_string(),
            "not a checkpoint file",
        ));
    }
    let mut r = CkptReader {
        path: path.display().to_string(),
        lines,
    };
    let iter = r.ints("iter", 1)?[0] as usize;
    let rows = r.ints("rows", 1)?[0] as usize;
    let word_pos_toks = r.line("rng_word_pos")?;
    if word_pos_toks.len() != 1 {
        return Err(Error::parse(
            path.display().to_string(),
            "`rng_word_pos` needs one value",
        ));
    }
    let rng_word_pos: u128 = word_pos_toks[0]
        .parse()
        .map_err(|_| Error::parse(path.display().to_string(), "bad rng_word_pos"))?;
    let n_blocks = BLOCK_NAMES.len();
    let steps_v = r.floats("steps", n_blocks)?;
    let acc_v = r.ints("acc", n_blocks)?;
    let prop_v = r.ints("prop", n_blocks)?;
    let theta = r.floats("theta", model.d())?;
    let psi = DVector::from_vec(r.floats("psi", model.j_w())?);
    let v = DVector::from_vec(r.floats("v", model.j_v())?);
    let scalars = r.floats("scalars", 3)?;
    let kappa_u = r.floats("kappa_u", model.j_u())?;
    let r_vals = r.floats("R", model.j_r() * model.j_v())?;
    let state = CalibrationState {
        theta_star: theta,
        psi,
        v,
        sigma_v2: scalars[0],
        sigma_r2: scalars[1],
        sigma_eps2: scalars[2],
        kappa_u,
        r: DMatrix::from_column_slice(model.j_r(), model.j_v(), &r_vals),
    };
    let mut steps = [0.0; 8];
    steps.copy_from_slice(&steps_v);
    let mut acc = [0u64; 8];
    acc.copy_from_slice(&acc_v);
    let mut prop = [0u64; 8];
    prop.copy_from_slice(&prop_v);
    Ok((
        SamplerSnapshot {
            state,
            steps,
            acc,
            prop,
            iter,
            rng_word_pos,
        },
        rows,
    ))
}

fn read_chain_file(path: &Path, model: &CalibrationModel, cfg: &McmcConfig) -> Result<McmcChain> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path.display().to_string(), "empty chain file"))?;
    let expected = chain_header(model);
    if header != expected.join(" ") {
        return Err(Error::parse(
            path.display().to_string(),
            "chain header does not match the model",
        ));
    }
    let (d, jw, jv, ju, jr) = (
        model.d(),
        model.j_w(),
        model.j_v(),
        model.j_u(),
        model.j_r(),
    );
    let n_cols = d + jw + jv + 3 + ju + jr * jv + 1;
    let mut states = Vec::new();
    let mut log_post = Vec::new();
    for line in lines {
        let row: Vec<f64> = line
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| Error::parse(path.display().to_string(), format!("bad number `{t}`")))
            })
            .collect::<Result<_>>()?;
        if row.len() != n_cols {
            return Err(Error::parse(
                path.display().to_string(),
                format!("row has {} columns, expected {n_cols}", row.len()),
            ));
        }
        let mut at = 0usize;
        let mut take = |n: usize| {
            let s = &row[at..at + n];
            at += n;
            s.to_vec()
        };
        let theta = take(d);
        let psi = DVector::from_vec(take(jw));
        let v = DVector::from_vec(take(jv));
        let scalars = take(3);
        let kappa_u = take(ju);
        let r_vals = take(jr * jv);
        states.push(CalibrationState {
            theta_star: theta,
            psi,
            v,
            sigma_v2: scalars[0],
            sigma_r2: scalars[1],
            sigma_eps2: scalars[2],
            kappa_u,
            r: DMatrix::from_column_slice(jr, jv, &r_vals),
        });
        log_post.push(row[n_cols - 1]);
    }
    Ok(McmcChain {
        states,
        log_post,
        accept_rate: [0.0; 8],
        seed: cfg.seed,
        n_iter: cfg.n_iter,
        burn_in: cfg.burn_in,
        thin: cfg.thin,
    })
}

fn cmd_project(cfg: RunConfig) -> Result<()> {
    let (design, _) = read_ensemble_text(&cfg.ensemble)?;
    let chain_path = cfg.chain_path();
    let (thetas, d) = read_theta_columns(&chain_path)?;
    if d != design.dim() {
        return Err(Error::Validation(format!(
            "chain has {d} input columns, design has {}",
            design.dim()
        )));
    }
    let volumes = read_volumes(&cfg.volume_file, design.n_runs())?;
    write_manifest(
        &cfg,
        "project",
        &[&cfg.ensemble, &chain_path, &cfg.volume_file],
    )?;
    let proj = fit_projection(&design, &volumes)?;
    let sample = project_posterior(&thetas, &proj, cfg.include_emulator_noise, cfg.seed)?;
    let mut out = String::new();
    for v in &sample {
        out.push_str(&format!("{v:.17e}\n"));
    }
    write_text(&cfg.output_dir.join("projection_sample.txt"), &out)?;
    write_density(
        &cfg.output_dir.join("projection_density.txt"),
        &sample,
        cfg.density_grid,
    )?;

    // uniform-prior baseline over the unit design box, same sample size
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let prior_thetas: Vec<Vec<f64>> = (0..thetas.len())
        .map(|_| (0..d).map(|_| rng.gen::<f64>()).collect())
        .collect();
    let prior_sample =
        project_posterior(&prior_thetas, &proj, cfg.include_emulator_noise, cfg.seed)?;
    write_density(
        &cfg.output_dir.join("prior_density.txt"),
        &prior_sample,
        cfg.density_grid,
    )
}

fn write_density(path: &Path, sample: &[f64], n_grid: usize) -> Result<()> {
    let table = density_table(sample, n_grid, None);
    let mut out = String::new();
    for (x, dens) in table {
        out.push_str(&format!("{x:.17e} {dens:.17e}\n"));
    }
    write_text(path, &out)
}

fn read_theta_columns(path: &Path) -> Result<(Vec<Vec<f64>>, usize)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::parse(path.display().to_string(), "empty chain file"))?;
    let cols: Vec<usize> = header
        .split_whitespace()
        .enumerate()
        .filter(|(_, name)| name.starts_with("theta"))
        .map(|(i, _)| i)
        .collect();
    if cols.is_empty() {
        return Err(Error::parse(
            path.display().to_string(),
            "chain file has no theta columns",
        ));
    }
    let mut thetas = Vec::new();
    for line in lines {
        let row: Vec<&str> = line.split_whitespace().collect();
        let theta: Vec<f64> = cols
            .iter()
            .map(|&i| {
                row.get(i)
                    .ok_or_else(|| Error::parse(path.display().to_string(), "short chain row"))?
                    .parse::<f64>()
                    .map_err(|_| {
                        Error::parse(path.display().to_string(), format!("bad number `{}`", row[i]))
                    })
            })
            .collect::<Result<_>>()?;
        thetas.push(theta);
    }
    if thetas.is_empty() {
        return Err(Error::Validation("chain file has no samples".into()));
    }
    let d = cols.len();
    Ok((thetas, d))
}

fn read_volumes(path: &Path, n_runs: usize) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|_| Error::parse(path.display().to_string(), format!("bad number `{t}`")))
        })
        .collect::<Result<_>>()?;
    if vals.len() != n_runs {
        return Err(Error::Validation(format!(
            "volume file has {} values for {n_runs} runs",
            vals.len()
        )));
    }
    Ok(vals)
}
