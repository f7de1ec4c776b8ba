//! Experiment configuration, synthetic data and end-to-end runs with
//! persisted artifacts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result, StageExt};
use crate::gp_regression::{fit_hyperparameters_with, FitOptions, KernelModel};
use crate::gradient_matching::{build_context, JointDensity, ParameterPrior};
use crate::kernels::KernelFamily;
use crate::lsq_refine::{objective, refine, LsqConfig, Refinement, StopReason};
use crate::mcmc::{posterior_estimate, run_chain, ChainOutput, McmcConfig};
use crate::observations::ObservationSet;
use crate::ode_core::{builtin, integrate_with, OdeSystem, StepSchedule, Trajectory};
use crate::sensitivity::{sensitivity_indices, SensitivityMatrix};

pub const PRESETS: [&str; 8] = [
    "lv-x1obs",
    "lv-x2obs",
    "lv-x1obs-noise05",
    "lv-x2obs-noise05",
    "fhn-x1obs",
    "fhn-x2obs",
    "pt-x3latent",
    "pt-x1x3latent",
];

/// Prior draws screened for the chain's starting parameters in every preset.
pub const INIT_DRAWS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseModel {
    Std(f64),
    /// Per-state noise std is `RMS(signal) / snr`.
    Snr(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TimeGrid {
    /// `count` equally spaced points including both ends.
    Uniform {
        count: usize,
        start: f64,
        end: f64,
    },
    Explicit(Vec<f64>),
}

impl TimeGrid {
    pub fn points(&self) -> Vec<f64> {
        match self {
            TimeGrid::Uniform { count, start, end } => {
                let n = *count;
                (0..n)
                    .map(|i| if i + 1 == n { *end } else { start + (end - start) * i as f64 / (n - 1) as f64 })
                    .collect()
            }
            TimeGrid::Explicit(t) => t.clone(),
        }
    }
}

/// Everything needed to regenerate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub system: String,
    pub fhn_standard_sign: bool,
    pub observed: Vec<usize>,
    pub theta: Vec<f64>,
    pub init: Vec<f64>,
    pub noise: NoiseModel,
    pub times: TimeGrid,
    pub kernel: KernelFamily,
    pub schedule: StepSchedule,
    /// Upper corner of the uniform prior box; the lower corner is zero.
    pub prior_upper: Vec<f64>,
    pub mcmc: McmcConfig,
    pub lsq: LsqConfig,
    /// Starting point for `refine-only`; defaults to the true parameters.
    pub refine_start: Option<Vec<f64>>,
    pub sensitivity_fd_step: f64,
    pub seed: u64,
}

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let name = match name {
            "lv" => "lv-x1obs",
            "fhn" => "fhn-x1obs",
            "pt" => "pt-x3latent",
            other => other,
        };
        let lv = |observed: usize, noise: f64| {
            let theta = vec![2.0, 1.0, 4.0, 1.0];
            Self {
                name: name.to_string(),
                system: "lotka_volterra".into(),
                fhn_standard_sign: false,
                observed: vec![observed],
                prior_upper: ParameterPrior::around(&theta).upper,
                theta,
                init: vec![5.0, 3.0],
                noise: NoiseModel::Std(noise),
                times: TimeGrid::Uniform { count: 20, start: 0.0, end: 2.0 },
                kernel: KernelFamily::SquaredExponential,
                schedule: StepSchedule::uniform(0.005),
                mcmc: McmcConfig { gamma: 0.3, init_draws: INIT_DRAWS, ..McmcConfig::default() },
                lsq: LsqConfig::default(),
                refine_start: None,
                sensitivity_fd_step: 1e-4,
                seed: 0,
            }
        };
        let fhn = |observed: usize| {
            let theta = vec![0.2, 0.2, 3.0];
            Self {
                name: name.to_string(),
                system: "fitzhugh_nagumo".into(),
                fhn_standard_sign: true,
                observed: vec![observed],
                prior_upper: ParameterPrior::around(&theta).upper,
                theta,
                init: vec![-1.0, 1.0],
                noise: NoiseModel::Snr(100.0),
                times: TimeGrid::Uniform { count: 100, start: 0.0, end: 10.0 },
                kernel: KernelFamily::Matern52,
                schedule: StepSchedule::uniform(0.01),
                mcmc: McmcConfig { gamma: 0.3, init_draws: INIT_DRAWS, ..McmcConfig::default() },
                lsq: LsqConfig::default(),
                refine_start: None,
                sensitivity_fd_step: 1e-4,
                seed: 0,
            }
        };
        let pt = |observed: Vec<usize>| {
            let theta = vec![0.07, 0.6, 0.05, 0.3, 0.017, 0.3];
            Self {
                name: name.to_string(),
                system: "protein_transduction".into(),
                fhn_standard_sign: false,
                observed,
                prior_upper: ParameterPrior::around(&theta).upper,
                theta,
                init: vec![1.0, 0.0, 1.0, 0.0, 0.0],
                noise: NoiseModel::Std(0.01),
                times: TimeGrid::Explicit(vec![
                    0.0, 1.0, 2.0, 4.0, 5.0, 7.0, 10.0, 15.0, 20.0, 30.0, 40.0, 50.0, 60.0, 80.0, 100.0,
                ]),
                kernel: KernelFamily::Sigmoid,
                schedule: StepSchedule::refined(0.01, 1.0, 0.05),
                mcmc: McmcConfig { gamma: 1e-4, init_draws: INIT_DRAWS, ..McmcConfig::default() },
                lsq: LsqConfig::default(),
                refine_start: None,
                sensitivity_fd_step: 1e-4,
                seed: 0,
            }
        };
        Ok(match name {
            "lv-x1obs" => lv(0, 0.1),
            "lv-x2obs" => lv(1, 0.1),
            "lv-x1obs-noise05" => lv(0, 0.5),
            "lv-x2obs-noise05" => lv(1, 0.5),
            "fhn-x1obs" => fhn(0),
            "fhn-x2obs" => fhn(1),
            "pt-x3latent" => pt(vec![0, 1, 3, 4]),
            "pt-x1x3latent" => pt(vec![1, 3, 4]),
            other => return Err(Error::Config(format!("unknown preset '{other}'"))),
        })
    }

    /// Overrides the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.mcmc.seed = seed;
        self
    }

    /// The ODE system partitioned into observed and latent states.
    pub fn build_system(&self) -> Result<OdeSystem> {
        let full = builtin(&self.system, self.fhn_standard_sign)?;
        let latent_init: Vec<f64> =
            (0..full.state_dim()).filter(|i| !self.observed.contains(i)).map(|i| self.init[i]).collect();
        full.with_partition(&self.observed, &latent_init)
    }

    pub fn prior(&self) -> Result<ParameterPrior> {
        ParameterPrior::new(vec![0.0; self.prior_upper.len()], self.prior_upper.clone())
    }

    pub fn validate(&self) -> Result<()> {
        let system = builtin(&self.system, self.fhn_standard_sign)?;
        let err = |m: String| Err(Error::Config(m));
        if self.theta.len() != system.param_dim() || self.prior_upper.len() != system.param_dim() {
            return err(format!("{} expects {} parameters", system.name(), system.param_dim()));
        }
        if self.refine_start.as_ref().is_some_and(|r| r.len() != system.param_dim()) {
            return err("refine_start has the wrong length".into());
        }
        if self.init.len() != system.state_dim() {
            return err(format!("{} expects {} initial values", system.name(), system.state_dim()));
        }
        if self.observed.is_empty() || self.observed.iter().any(|&i| i >= system.state_dim()) {
            return err(format!("invalid observed indices {:?}", self.observed));
        }
        match self.noise {
            NoiseModel::Std(s) if !(s >= 0.0 && s.is_finite()) => return err("noise_std must be >= 0".into()),
            NoiseModel::Snr(s) if !(s > 0.0 && s.is_finite()) => return err("snr must be > 0".into()),
            _ => {}
        }
        let times = self.times.points();
        if times.len() < 4 || times.windows(2).any(|w| w[1] <= w[0]) {
            return err("need at least 4 strictly increasing observation times".into());
        }
        if !(self.sensitivity_fd_step > 0.0) {
            return err("sensitivity.fd_step must be positive".into());
        }
        self.build_system()?;
        self.prior()?;
        self.mcmc.validate()?;
        self.lsq.validate()
    }

    /// Flat `key = value` text. Floats use the shortest representation that
    /// parses back to the same value.
    pub fn to_ini(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        put("name", self.name.clone());
        put("system", self.system.clone());
        put("fhn_standard_sign", self.fhn_standard_sign.to_string());
        put("observed", self.observed.iter().map(|i| (i + 1).to_string()).collect::<Vec<_>>().join(","));
        put("theta", list(&self.theta));
        put("init", list(&self.init));
        match self.noise {
            NoiseModel::Std(s) => put("noise_std", s.to_string()),
            NoiseModel::Snr(s) => put("snr", s.to_string()),
        }
        match &self.times {
            TimeGrid::Uniform { count, start, end } => put("times", format!("uniform:{count}:{start}:{end}")),
            TimeGrid::Explicit(t) => put("times", list(t)),
        }
        put("kernel", self.kernel.name().to_string());
        put("step", self.schedule.to_string());
        put("prior_upper", list(&self.prior_upper));
        put("seed", self.seed.to_string());
        put("gamma", self.mcmc.gamma.to_string());
        put("mcmc.samples", self.mcmc.n_samples.to_string());
        put("mcmc.burnin", self.mcmc.n_burnin.to_string());
        put("mcmc.sigma_s", list(&self.mcmc.sigma_s));
        put("mcmc.sigma_p", list(&self.mcmc.sigma_p));
        put("mcmc.strict_paper_caching", self.mcmc.strict_paper_caching.to_string());
        put("mcmc.init_draws", self.mcmc.init_draws.to_string());
        put("lsq.max_iters", self.lsq.max_iters.to_string());
        put("lsq.fd_step", self.lsq.fd_step.to_string());
        put("lsq.initial_step", self.lsq.initial_step.to_string());
        put("lsq.shrink", self.lsq.shrink.to_string());
        put("lsq.armijo", self.lsq.armijo.to_string());
        put("lsq.tol_grad", self.lsq.tol_grad.to_string());
        put("lsq.tol_obj", self.lsq.tol_obj.to_string());
        put("lsq.optimize_latent_init", self.lsq.optimize_latent_init.to_string());
        if let Some(r) = &self.refine_start {
            put("refine_start", list(r));
        }
        put("sensitivity.fd_step", self.sensitivity_fd_step.to_string());
        out
    }

    /// Parses `key = value` lines. A `preset` key, if present, supplies the
    /// defaults that the remaining keys override; without it every core key
    /// must be given. `#` and `;` start comments, `[section]` lines are ignored.
    pub fn from_ini(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split(['#', ';']).next().unwrap_or("").trim();
            if line.is_empty() || (line.starts_with('[') && line.ends_with(']')) {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected 'key = value'", no + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }

        let mut cfg = match kv.remove("preset") {
            Some(p) => Self::preset(&p)?,
            None => {
                for key in ["system", "observed", "theta", "init", "times", "kernel", "step"] {
                    if !kv.contains_key(key) {
                        return Err(Error::Config(format!("missing key '{key}'")));
                    }
                }
                let mut base = Self::preset("lv-x1obs")?;
                base.name = "custom".into();
                base.refine_start = None;
                base
            }
        };
        let mut prior_given = false;
        for (key, value) in &kv {
            let bad = || Error::Config(format!("invalid value for '{key}': '{value}'"));
            let float = || value.parse::<f64>().map_err(|_| bad());
            let count = || value.parse::<usize>().map_err(|_| bad());
            let flag = || value.parse::<bool>().map_err(|_| bad());
            let floats = || parse_list(value).map_err(|_| bad());
            match key.as_str() {
                "name" => cfg.name = value.clone(),
                "system" => cfg.system = value.clone(),
                "fhn_standard_sign" => cfg.fhn_standard_sign = flag()?,
                "observed" => {
                    cfg.observed = value
                        .split(',')
                        .map(|s| s.trim().parse::<usize>().ok().filter(|i| *i >= 1).map(|i| i - 1))
                        .collect::<Option<Vec<_>>>()
                        .ok_or_else(bad)?;
                }
                "theta" => cfg.theta = floats()?,
                "init" => cfg.init = floats()?,
                "noise_std" => cfg.noise = NoiseModel::Std(float()?),
                "snr" => cfg.noise = NoiseModel::Snr(float()?),
                "times" => cfg.times = parse_times(value).ok_or_else(bad)?,
                "kernel" => cfg.kernel = value.parse().map_err(|_| bad())?,
                "step" => cfg.schedule = value.parse()?,
                "prior_upper" => {
                    cfg.prior_upper = floats()?;
                    prior_given = true;
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
                "gamma" => cfg.mcmc.gamma = float()?,
                "mcmc.samples" => cfg.mcmc.n_samples = count()?,
                "mcmc.burnin" => cfg.mcmc.n_burnin = count()?,
                "mcmc.sigma_s" => cfg.mcmc.sigma_s = floats()?,
                "mcmc.sigma_p" => cfg.mcmc.sigma_p = floats()?,
                "mcmc.strict_paper_caching" => cfg.mcmc.strict_paper_caching = flag()?,
                "mcmc.init_draws" => cfg.mcmc.init_draws = count()?,
                "lsq.max_iters" => cfg.lsq.max_iters = count()?,
                "lsq.fd_step" => cfg.lsq.fd_step = float()?,
                "lsq.initial_step" => cfg.lsq.initial_step = float()?,
                "lsq.shrink" => cfg.lsq.shrink = float()?,
                "lsq.armijo" => cfg.lsq.armijo = float()?,
                "lsq.tol_grad" => cfg.lsq.tol_grad = float()?,
                "lsq.tol_obj" => cfg.lsq.tol_obj = float()?,
                "lsq.optimize_latent_init" => cfg.lsq.optimize_latent_init = flag()?,
                "refine_start" => cfg.refine_start = Some(floats()?),
                "sensitivity.fd_step" => cfg.sensitivity_fd_step = float()?,
                other => return Err(Error::Config(format!("unknown key '{other}'"))),
            }
        }
        if !prior_given && kv.contains_key("theta") {
            cfg.prior_upper = ParameterPrior::around(&cfg.theta).upper;
        }
        cfg.mcmc.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_list(s: &str) -> std::result::Result<Vec<f64>, std::num::ParseFloatError> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|x| x.trim().parse::<f64>()).collect()
}

fn parse_times(s: &str) -> Option<TimeGrid> {
    if let Some(rest) = s.strip_prefix("uniform:") {
        let parts: Vec<&str> = rest.split(':').map(str::trim).collect();
        if parts.len() != 3 {
            return None;
        }
        return Some(TimeGrid::Uniform {
            count: parts[0].parse().ok()?,
            start: parts[1].parse().ok()?,
            end: parts[2].parse().ok()?,
        });
    }
    parse_list(s).ok().map(TimeGrid::Explicit)
}

/// Noise-free trajectory at the true parameters, sampled at the observation times.
pub fn ground_truth(config: &ExperimentConfig) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let system = builtin(&config.system, config.fhn_standard_sign)?;
    let times = config.times.points();
    let traj =
        integrate_with(&system, &config.theta, &config.init, (times[0], times[times.len() - 1]), &config.schedule)?;
    let states = traj.sample(&times)?;
    Ok((times, states))
}

/// Per-state noise standard deviation for the observed components.
pub fn noise_levels(config: &ExperimentConfig, truth: &[Vec<f64>]) -> Vec<f64> {
    config
        .observed
        .iter()
        .map(|&c| match config.noise {
            NoiseModel::Std(s) => s,
            NoiseModel::Snr(snr) => {
                let ms = truth.iter().map(|r| r[c] * r[c]).sum::<f64>() / truth.len() as f64;
                ms.sqrt() / snr
            }
        })
        .collect()
}

/// Integrates at the true parameters and adds i.i.d. Gaussian noise to the
/// observed components.
pub fn generate_data(config: &ExperimentConfig) -> Result<ObservationSet> {
    let (times, truth) = ground_truth(config)?;
    let stds = noise_levels(config, &truth);
    // the data stream is kept apart from the sampler stream seeded by the same value
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);
    let mut values: Vec<Vec<f64>> = vec![Vec::with_capacity(times.len()); config.observed.len()];
    for row in &truth {
        for (k, &c) in config.observed.iter().enumerate() {
            let e: f64 = StandardNormal.sample(&mut rng);
            values[k].push(row[c] + stds[k] * e);
        }
    }
    ObservationSet::new(times, config.observed.clone(), values)
}

/// Step 1: one GP per observed state.
pub fn fit_gps(config: &ExperimentConfig, y: &ObservationSet) -> Result<Vec<KernelModel>> {
    let opts = FitOptions { seed: config.seed, ..FitOptions::default() };
    y.values.par_iter().map(|v| fit_hyperparameters_with(&y.times, v, config.kernel, &opts)).collect()
}

/// Sensitivity indices at the true parameters over the observation span.
pub fn run_sensitivity(config: &ExperimentConfig) -> Result<SensitivityMatrix> {
    let system = builtin(&config.system, config.fhn_standard_sign)?;
    let times = config.times.points();
    sensitivity_indices(
        &system,
        &config.theta,
        &config.init,
        (times[0], times[times.len() - 1]),
        &config.schedule,
        config.sensitivity_fd_step,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StageTimings {
    pub simulate: f64,
    pub gp: f64,
    pub mcmc: f64,
    pub refine: f64,
}

/// Summary of a full run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub preset: String,
    pub seed: u64,
    pub theta_true: Vec<f64>,
    pub gps: Vec<KernelModel>,
    pub theta_fgpgm: Vec<f64>,
    pub theta_refined: Vec<f64>,
    /// Initial state used for reconstruction and refinement: the posterior
    /// mean of the observed states at the first time, known latent values.
    pub full_init: Vec<f64>,
    pub rel_err_fgpgm: Vec<f64>,
    pub rel_err_refined: Vec<f64>,
    /// RMSE against the noise-free trajectory on the observed states.
    pub rmse_fgpgm: f64,
    pub rmse_refined: f64,
    pub noise_std: Vec<f64>,
    pub objective_fgpgm: f64,
    pub objective_refined: f64,
    pub objective_true: f64,
    pub lsq_stop: StopReason,
    pub lsq_iterations: usize,
    pub state_acceptance: f64,
    pub param_acceptance: f64,
    pub timings: StageTimings,
}

impl RunReport {
    pub fn to_text(&self) -> String {
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let mut out = String::new();
        let _ = writeln!(out, "preset = {}", self.preset);
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "theta_true = {}", list(&self.theta_true));
        let _ = writeln!(out, "theta_fgpgm = {}", list(&self.theta_fgpgm));
        let _ = writeln!(out, "theta_refined = {}", list(&self.theta_refined));
        let _ = writeln!(out, "full_init = {}", list(&self.full_init));
        let _ = writeln!(out, "rel_err_fgpgm = {}", list(&self.rel_err_fgpgm));
        let _ = writeln!(out, "rel_err_refined = {}", list(&self.rel_err_refined));
        let _ = writeln!(out, "rmse_fgpgm = {}", self.rmse_fgpgm);
        let _ = writeln!(out, "rmse_refined = {}", self.rmse_refined);
        let _ = writeln!(out, "noise_std = {}", list(&self.noise_std));
        let _ = writeln!(out, "objective_fgpgm = {}", self.objective_fgpgm);
        let _ = writeln!(out, "objective_refined = {}", self.objective_refined);
        let _ = writeln!(out, "objective_true = {}", self.objective_true);
        let _ = writeln!(out, "lsq_stop = {:?}", self.lsq_stop);
        let _ = writeln!(out, "lsq_iterations = {}", self.lsq_iterations);
        let _ = writeln!(out, "state_acceptance = {}", self.state_acceptance);
        let _ = writeln!(out, "param_acceptance = {}", self.param_acceptance);
        for (k, gp) in self.gps.iter().enumerate() {
            for line in gp.describe().lines() {
                let _ = writeln!(out, "gp{}.{}", k + 1, line);
            }
        }
        let t = &self.timings;
        let _ = writeln!(out, "seconds.simulate = {:.3}", t.simulate);
        let _ = writeln!(out, "seconds.gp = {:.3}", t.gp);
        let _ = writeln!(out, "seconds.mcmc = {:.3}", t.mcmc);
        let _ = writeln!(out, "seconds.refine = {:.3}", t.refine);
        out
    }
}

pub fn relative_errors(estimate: &[f64], truth: &[f64]) -> Vec<f64> {
    estimate.iter().zip(truth).map(|(e, t)| (e - t).abs() / t.abs()).collect()
}

/// RMSE of the observed components of the trajectory at `theta` from `init`
/// against `truth` rows; `+∞` if the integration fails.
pub fn trajectory_rmse(
    system: &OdeSystem,
    theta: &[f64],
    init: &[f64],
    times: &[f64],
    schedule: &StepSchedule,
    truth: &[Vec<f64>],
) -> f64 {
    let traj: Result<Trajectory> = integrate_with(system, theta, init, (times[0], times[times.len() - 1]), schedule);
    let Ok(states) = traj.and_then(|t| t.sample(times)) else {
        return f64::INFINITY;
    };
    let obs = system.observed_idx();
    let mut acc = 0.0;
    for (row, want) in states.iter().zip(truth) {
        for &c in obs {
            acc += (row[c] - want[c]).powi(2);
        }
    }
    (acc / (states.len() * obs.len()) as f64).sqrt()
}

/// `sweep,theta1..,logdensity` for every sweep, burn-in included.
pub fn chain_csv(chain: &ChainOutput) -> String {
    let p = chain.initial.theta.len();
    let mut out = String::from("sweep");
    for j in 0..p {
        let _ = write!(out, ",theta{}", j + 1);
    }
    out.push_str(",logdensity\n");
    for row in &chain.trace {
        out.push_str(&row.sweep.to_string());
        for v in &row.theta {
            let _ = write!(out, ",{v}");
        }
        let _ = writeln!(out, ",{}", row.log_density);
    }
    out
}

/// `iter,objective,grad_norm,theta1..` plus fitted latent initial values.
pub fn trace_csv(refinement: &Refinement, system: &OdeSystem) -> String {
    let p = system.param_dim();
    let mut out = String::from("iter,objective,grad_norm");
    for j in 0..p {
        let _ = write!(out, ",theta{}", j + 1);
    }
    let width = refinement.trace.first().map_or(p, |t| t.x.len());
    for &l in system.latent_idx().iter().take(width - p) {
        let _ = write!(out, ",init_x{}", l + 1);
    }
    out.push('\n');
    for e in &refinement.trace {
        let _ = write!(out, "{},{},{}", e.iter, e.objective, e.grad_norm);
        for v in &e.x {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Full pipeline: simulate, fit the GPs, sample, refine. Writes
/// `config.ini`, `data.csv`, `chain.csv`, `trace.csv` and `report.txt` to
/// `out` when given.
pub fn run_experiment(config: &ExperimentConfig, out: Option<&Path>) -> Result<RunReport> {
    config.validate().stage("config")?;
    let system = config.build_system().stage("config")?;

    let clock = Instant::now();
    let y = generate_data(config).stage("simulate")?;
    let (times, truth) = ground_truth(config).stage("simulate")?;
    let noise_std = noise_levels(config, &truth);
    let t_sim = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let gps = fit_gps(config, &y).stage("fit-gp")?;
    let t_gp = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let ctx = build_context(gps.clone(), config.mcmc.gamma).stage("mcmc")?;
    let density =
        JointDensity::new(ctx, system.clone(), y.clone(), config.prior()?, config.schedule.clone()).stage("mcmc")?;
    let chain = run_chain(&density, &config.mcmc).stage("mcmc")?;
    let estimate = posterior_estimate(&chain.samples).stage("mcmc")?;
    let t_mcmc = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let n = y.len();
    let x0: Vec<f64> = (0..y.n_observed()).map(|k| estimate.x_m[k * n]).collect();
    let full_init = system.assemble_init(&x0);
    let refinement = refine(&system, &estimate.theta, &full_init, &y, &config.schedule, &config.lsq).stage("refine")?;
    let t_refine = clock.elapsed().as_secs_f64();

    let report = RunReport {
        preset: config.name.clone(),
        seed: config.seed,
        theta_true: config.theta.clone(),
        rel_err_fgpgm: relative_errors(&estimate.theta, &config.theta),
        rel_err_refined: relative_errors(&refinement.theta, &config.theta),
        rmse_fgpgm: trajectory_rmse(&system, &estimate.theta, &full_init, &times, &config.schedule, &truth),
        rmse_refined: trajectory_rmse(
            &system,
            &refinement.theta,
            &refinement.full_init,
            &times,
            &config.schedule,
            &truth,
        ),
        objective_fgpgm: refinement.trace.first().map_or(f64::NAN, |t| t.objective),
        objective_refined: refinement.objective,
        objective_true: objective(&system, &config.theta, &config.init, &y, &config.schedule),
        lsq_stop: refinement.stop,
        lsq_iterations: refinement.trace.len().saturating_sub(1),
        state_acceptance: chain.mean_state_acceptance(),
        param_acceptance: chain.mean_param_acceptance(),
        gps,
        theta_fgpgm: estimate.theta,
        theta_refined: refinement.theta.clone(),
        full_init,
        noise_std,
        timings: StageTimings { simulate: t_sim, gp: t_gp, mcmc: t_mcmc, refine: t_refine },
    };

    if let Some(dir) = out {
        let write = || -> Result<()> {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.ini"), config.to_ini())?;
            fs::write(dir.join("data.csv"), y.to_csv())?;
            fs::write(dir.join("chain.csv"), chain_csv(&chain))?;
            fs::write(dir.join("trace.csv"), trace_csv(&refinement, &system))?;
            fs::write(dir.join("report.txt"), report.to_text())?;
            Ok(())
        };
        write().stage("io")?;
    }
    Ok(report)
}

/// Outcome of [`run_refine_only`].
#[derive(Debug, Clone)]
pub struct RefineOnlyReport {
    pub start: Vec<f64>,
    pub refinement: Refinement,
    /// Objective at the true parameters on the same data.
    pub objective_true: f64,
}

/// Pure least squares from `refine_start` (or the true θ) with the true
/// initial state, on freshly generated data.
pub fn run_refine_only(config: &ExperimentConfig, out: Option<&Path>) -> Result<RefineOnlyReport> {
    config.validate().stage("config")?;
    let system = config.build_system().stage("config")?;
    let y = generate_data(config).stage("simulate")?;
    let start = config.refine_start.clone().unwrap_or_else(|| config.theta.clone());
    let refinement = refine(&system, &start, &config.init, &y, &config.schedule, &config.lsq).stage("refine")?;
    let objective_true = objective(&system, &config.theta, &config.init, &y, &config.schedule);
    if let Some(dir) = out {
        let write = || -> Result<()> {
            fs::create_dir_all(dir)?;
            fs::write(dir.join("config.ini"), config.to_ini())?;
            fs::write(dir.join("data.csv"), y.to_csv())?;
            fs::write(dir.join("trace.csv"), trace_csv(&refinement, &system))?;
            let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
            let text = format!(
                "preset = {}\nseed = {}\ntheta_start = {}\ntheta_refined = {}\nobjective_refined = {}\nobjective_true = {}\nlsq_stop = {:?}\n",
                config.name,
                config.seed,
                list(&start),
                list(&refinement.theta),
                refinement.objective,
                objective_true,
                refinement.stop,
            );
            fs::write(dir.join("report.txt"), text)?;
            Ok(())
        };
        write().stage("io")?;
    }
    Ok(RefineOnlyReport { start, refinement, objective_true })
}
