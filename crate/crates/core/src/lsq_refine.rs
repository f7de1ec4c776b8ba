//! Least-squares refinement of parameters by finite-difference gradient descent.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::observations::ObservationSet;
use crate::ode_core::{integrate_with, OdeSystem, StepSchedule};

#[derive(Debug, Clone, PartialEq)]
pub struct LsqConfig {
    pub max_iters: usize,
    /// Central-difference step relative to `max(|θ_j|, 1)`.
    pub fd_step: f64,
    /// Trial step length of the first line search.
    pub initial_step: f64,
    /// Backtracking factor in (0, 1).
    pub shrink: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub tol_grad: f64,
    /// Stop when an iteration lowers the objective by less than
    /// `tol_obj · (1 + objective)`.
    pub tol_obj: f64,
    /// Also fit the latent initial values instead of holding them fixed.
    pub optimize_latent_init: bool,
}

impl Default for LsqConfig {
    fn default() -> Self {
        Self {
            max_iters: 2000,
            fd_step: 1e-5,
            initial_step: 1e-2,
            shrink: 0.5,
            armijo: 1e-4,
            tol_grad: 1e-8,
            tol_obj: 1e-12,
            optimize_latent_init: false,
        }
    }
}

impl LsqConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.fd_step, self.initial_step, self.armijo, self.tol_grad, self.tol_obj];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.max_iters == 0 {
            return Err(Error::InvalidInput("least-squares settings must be positive".into()));
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidInput(format!("shrink factor {} not in (0, 1)", self.shrink)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    GradientTolerance,
    ObjectiveTolerance,
    MaxIterations,
    /// No step length satisfied the sufficient-decrease condition.
    LineSearchStalled,
    NonFiniteStart,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub iter: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct DescentResult {
    pub x: Vec<f64>,
    pub objective: f64,
    pub trace: Vec<TraceEntry>,
    pub stop: StopReason,
}

/// Quadrature weights for the discrete L² norm on the observation grid:
/// `Δt` on a uniform grid, trapezoid weights otherwise.
pub fn quadrature_weights(times: &[f64]) -> Vec<f64> {
    let n = times.len();
    if n < 2 {
        return vec![1.0; n];
    }
    let dts: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let dt = dts[0];
    if dts.iter().all(|d| (d - dt).abs() <= 1e-9 * dt.abs()) {
        return vec![dt; n];
    }
    let mut w = vec![0.0; n];
    for (i, d) in dts.iter().enumerate() {
        w[i] += 0.5 * d;
        w[i + 1] += 0.5 * d;
    }
    w
}

/// Weighted squared mismatch between the observed components of the
/// trajectory started at `full_init` and the data. `+∞` if integration fails.
pub fn objective(
    system: &OdeSystem,
    theta: &[f64],
    full_init: &[f64],
    y: &ObservationSet,
    schedule: &StepSchedule,
) -> f64 {
    let Ok(traj) = integrate_with(system, theta, full_init, y.span(), schedule) else {
        return f64::INFINITY;
    };
    let weights = quadrature_weights(&y.times);
    let mut state = vec![0.0; system.state_dim()];
    let mut total = 0.0;
    for (i, &t) in y.times.iter().enumerate() {
        if traj.at(t, &mut state).is_err() {
            return f64::INFINITY;
        }
        for (k, &c) in y.observed_idx.iter().enumerate() {
            let r = state[c] - y.values[k][i];
            total += weights[i] * r * r;
        }
    }
    if total.is_finite() {
        total
    } else {
        f64::INFINITY
    }
}

/// Central-difference gradient with step `rel · max(|x_j|, 1)`; falls back to
/// a one-sided difference when one side is not finite.
pub fn fd_gradient<F>(f: &F, x: &[f64], fx: f64, rel: f64) -> Vec<f64>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    (0..x.len())
        .into_par_iter()
        .map(|j| {
            let h = rel * x[j].abs().max(1.0);
            let mut xp = x.to_vec();
            xp[j] += h;
            let fp = f(&xp);
            xp[j] = x[j] - h;
            let fm = f(&xp);
            match (fp.is_finite(), fm.is_finite()) {
                (true, true) => (fp - fm) / (2.0 * h),
                (true, false) => (fp - fx) / h,
                (false, true) => (fx - fm) / h,
                (false, false) => 0.0,
            }
        })
        .collect()
}

/// Gradient descent with Armijo backtracking on an arbitrary objective.
///
/// The first line search tries `initial_step`; later ones start from the
/// Barzilai–Borwein step `sᵀs / sᵀΔg` of the previous iteration (or twice the
/// last accepted step when that is not positive). Only steps with sufficient
/// decrease are taken, so the recorded objective values are non-increasing.
pub fn descend<F>(f: F, x0: &[f64], config: &LsqConfig) -> Result<DescentResult>
where
    F: Fn(&[f64]) -> f64 + Sync,
{
    config.validate()?;
    let mut x = x0.to_vec();
    let mut fx = f(&x);
    let mut trace = Vec::new();
    if !fx.is_finite() {
        trace.push(TraceEntry { iter: 0, objective: fx, grad_norm: f64::NAN, x: x.clone() });
        return Ok(DescentResult { x, objective: fx, trace, stop: StopReason::NonFiniteStart });
    }
    let mut step = config.initial_step;
    let mut stop = StopReason::MaxIterations;
    let mut previous: Option<(Vec<f64>, Vec<f64>)> = None;
    for iter in 0..config.max_iters {
        let g = fd_gradient(&f, &x, fx, config.fd_step);
        if let Some((px, pg)) = previous.take() {
            let (mut ss, mut sy) = (0.0, 0.0);
            for j in 0..x.len() {
                let sj = x[j] - px[j];
                ss += sj * sj;
                sy += sj * (g[j] - pg[j]);
            }
            if sy > 0.0 && (ss / sy).is_finite() {
                step = ss / sy;
            }
        }
        let gnorm2: f64 = g.iter().map(|v| v * v).sum();
        let gnorm = gnorm2.sqrt();
        trace.push(TraceEntry { iter, objective: fx, grad_norm: gnorm, x: x.clone() });
        if gnorm < config.tol_grad {
            stop = StopReason::GradientTolerance;
            break;
        }

        let mut alpha = step;
        let mut accepted = None;
        // shrink until the step falls below machine resolution of x
        let scale = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        while alpha * gnorm > 1e-16 * scale {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi - alpha * gi).collect();
            let ft = f(&trial);
            if ft.is_finite() && ft <= fx - config.armijo * alpha * gnorm2 {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= config.shrink;
        }
        let Some((next, fnext)) = accepted else {
            stop = StopReason::LineSearchStalled;
            break;
        };
        let decrease = fx - fnext;
        previous = Some((x, g));
        x = next;
        fx = fnext;
        step = 2.0 * alpha;
        if decrease < config.tol_obj * (1.0 + fx.abs()) {
            stop = StopReason::ObjectiveTolerance;
            break;
        }
    }
    if trace.last().is_none_or(|t| t.x != x) {
        let g = fd_gradient(&f, &x, fx, config.fd_step);
        let grad_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        trace.push(TraceEntry { iter: trace.len(), objective: fx, grad_norm, x: x.clone() });
    }
    Ok(DescentResult { x, objective: fx, trace, stop })
}

/// Outcome of [`refine`].
#[derive(Debug, Clone)]
pub struct Refinement {
    pub theta: Vec<f64>,
    /// Initial state used for the final trajectory (latent entries change only
    /// with `optimize_latent_init`).
    pub full_init: Vec<f64>,
    pub objective: f64,
    /// `x` holds the optimized vector: `θ`, then latent initial values if fitted.
    pub trace: Vec<TraceEntry>,
    pub stop: StopReason,
}

/// Minimizes [`objective`] over `θ` starting from `theta_init`.
pub fn refine(
    system: &OdeSystem,
    theta_init: &[f64],
    full_init: &[f64],
    y: &ObservationSet,
    schedule: &StepSchedule,
    config: &LsqConfig,
) -> Result<Refinement> {
    if theta_init.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("initial parameters must be finite".into()));
    }
    if theta_init.len() != system.param_dim() || full_init.len() != system.state_dim() {
        return Err(Error::Dimension("initial guess does not match system".into()));
    }
    let p = theta_init.len();
    let latent = system.latent_idx().to_vec();
    let mut x0 = theta_init.to_vec();
    if config.optimize_latent_init {
        x0.extend(latent.iter().map(|&l| full_init[l]));
    }
    let unpack = |x: &[f64]| -> Vec<f64> {
        let mut init = full_init.to_vec();
        if config.optimize_latent_init {
            for (k, &l) in latent.iter().enumerate() {
                init[l] = x[p + k];
            }
        }
        init
    };
    let f = |x: &[f64]| objective(system, &x[..p], &unpack(x), y, schedule);
    let res = descend(f, &x0, config)?;
    Ok(Refinement {
        theta: res.x[..p].to_vec(),
        full_init: unpack(&res.x),
        objective: res.objective,
        trace: res.trace,
        stop: res.stop,
    })
}
