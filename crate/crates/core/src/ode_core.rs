//! ODE systems and a fixed-step RK4 integrator with Hermite dense output.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Magnitude beyond which an integration is considered to have blown up.
pub const BLOWUP_LIMIT: f64 = 1e8;

/// Right-hand side `f(x, θ)` writing `ẋ` into the output slice.
pub type RhsFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// An autonomous ODE system `ẋ = f(x, θ)` with an observed/latent partition.
#[derive(Clone)]
pub struct OdeSystem {
    name: String,
    state_dim: usize,
    param_dim: usize,
    rhs: Arc<RhsFn>,
    observed_idx: Vec<usize>,
    latent_idx: Vec<usize>,
    latent_init: Vec<f64>,
}

impl fmt::Debug for OdeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("OdeSystem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("param_dim", &self.param_dim)
            .field("observed_idx", &self.observed_idx)
            .field("latent_idx", &self.latent_idx)
            .field("latent_init", &self.latent_init)
            .finish()
    }
}

impl OdeSystem {
    /// A fully observed system. Use [`OdeSystem::with_partition`] to declare latent states.
    pub fn new<F>(name: impl Into<String>, state_dim: usize, param_dim: usize, rhs: F) -> Self
    where
        F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Self {
            name: name.into(),
            state_dim,
            param_dim,
            rhs: Arc::new(rhs),
            observed_idx: (0..state_dim).collect(),
            latent_idx: Vec::new(),
            latent_init: Vec::new(),
        }
    }

    /// Marks `observed` as measured; every other component is latent with the
    /// given initial values (in increasing index order).
    pub fn with_partition(mut self, observed: &[usize], latent_init: &[f64]) -> Result<Self> {
        let mut obs = observed.to_vec();
        obs.sort_unstable();
        obs.dedup();
        if obs.len() != observed.len() || obs.iter().any(|&i| i >= self.state_dim) {
            return Err(Error::InvalidInput(format!(
                "observed indices {observed:?} invalid for a {}-state system",
                self.state_dim
            )));
        }
        if obs.is_empty() {
            return Err(Error::InvalidInput("at least one state must be observed".into()));
        }
        let latent: Vec<usize> = (0..self.state_dim).filter(|i| !obs.contains(i)).collect();
        if latent_init.len() != latent.len() {
            return Err(Error::Dimension(format!(
                "{} latent states but {} latent initial values",
                latent.len(),
                latent_init.len()
            )));
        }
        self.observed_idx = obs;
        self.latent_idx = latent;
        self.latent_init = latent_init.to_vec();
        Ok(self)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn param_dim(&self) -> usize {
        self.param_dim
    }

    pub fn observed_idx(&self) -> &[usize] {
        &self.observed_idx
    }

    pub fn latent_idx(&self) -> &[usize] {
        &self.latent_idx
    }

    pub fn latent_init(&self) -> &[f64] {
        &self.latent_init
    }

    pub fn rhs(&self, x: &[f64], theta: &[f64], out: &mut [f64]) {
        (self.rhs)(x, theta, out)
    }

    pub fn derivative(&self, x: &[f64], theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.state_dim];
        self.rhs(x, theta, &mut out);
        out
    }

    /// Full initial state from observed initial values and the stored latent ones.
    pub fn assemble_init(&self, observed_init: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.state_dim];
        for (&i, &v) in self.observed_idx.iter().zip(observed_init) {
            x[i] = v;
        }
        for (&i, &v) in self.latent_idx.iter().zip(&self.latent_init) {
            x[i] = v;
        }
        x
    }
}

/// Lotka–Volterra predator–prey model, `θ = (θ₁, θ₂, θ₃, θ₄)`.
pub fn lotka_volterra() -> OdeSystem {
    OdeSystem::new("lotka_volterra", 2, 4, |x, p, dx| {
        dx[0] = p[0] * x[0] - p[1] * x[0] * x[1];
        dx[1] = -p[2] * x[1] + p[3] * x[0] * x[1];
    })
}

/// Sign convention and parameter labelling for the FitzHugh–Nagumo model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FhnVariant {
    /// `V̇ = θ₁(V − V³/3 + R)`, `Ṙ = (1/θ₁)(V − θ₂ + θ₃R)`.
    ///
    /// Unstable at `θ = (0.2, 0.2, 3)`: `R` grows at rate `θ₃/θ₁`.
    AsPrinted,
    /// Classical form with `θ = (a, b, c)`:
    /// `V̇ = c(V − V³/3 + R)`, `Ṙ = −(1/c)(V − a + bR)`.
    Standard,
}

pub fn fitzhugh_nagumo(variant: FhnVariant) -> OdeSystem {
    match variant {
        FhnVariant::AsPrinted => OdeSystem::new("fitzhugh_nagumo", 2, 3, |x, p, dx| {
            let (v, r) = (x[0], x[1]);
            dx[0] = p[0] * (v - v * v * v / 3.0 + r);
            dx[1] = (v - p[1] + p[2] * r) / p[0];
        }),
        FhnVariant::Standard => OdeSystem::new("fitzhugh_nagumo", 2, 3, |x, p, dx| {
            let (v, r) = (x[0], x[1]);
            dx[0] = p[2] * (v - v * v * v / 3.0 + r);
            dx[1] = -(v - p[0] + p[1] * r) / p[2];
        }),
    }
}

/// Protein transduction cascade with states `(S, dS, R, R_S, R_pp)`.
pub fn protein_transduction() -> OdeSystem {
    OdeSystem::new("protein_transduction", 5, 6, |x, p, dx| {
        let (s, r, rs, rpp) = (x[0], x[2], x[3], x[4]);
        let mm = p[4] * rpp / (p[5] + rpp).max(1e-12);
        dx[0] = -p[0] * s - p[1] * s * r + p[2] * rs;
        dx[1] = p[0] * s;
        dx[2] = -p[1] * s * r + p[2] * rs + mm;
        dx[3] = p[1] * s * r - p[2] * rs - p[3] * rs;
        dx[4] = p[3] * rs - mm;
    })
}

/// The three benchmark systems, fully observed.
pub fn builtin_systems() -> Vec<OdeSystem> {
    vec![lotka_volterra(), fitzhugh_nagumo(FhnVariant::AsPrinted), protein_transduction()]
}

/// Looks up a benchmark system by name.
pub fn builtin(name: &str, fhn_standard_sign: bool) -> Result<OdeSystem> {
    match name {
        "lotka_volterra" | "lv" => Ok(lotka_volterra()),
        "fitzhugh_nagumo" | "fhn" => {
            Ok(fitzhugh_nagumo(if fhn_standard_sign { FhnVariant::Standard } else { FhnVariant::AsPrinted }))
        }
        "protein_transduction" | "pt" => Ok(protein_transduction()),
        other => Err(Error::Config(format!("unknown system '{other}'"))),
    }
}

/// Piecewise-constant step size: segment `i` uses step `h_i` until `t_i`,
/// and the last step size is used for the remainder of the span.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    segments: Vec<(f64, f64)>,
}

impl StepSchedule {
    pub fn uniform(h: f64) -> Self {
        Self { segments: vec![(f64::INFINITY, h)] }
    }

    /// Step `fine` up to time `until`, then `coarse`.
    pub fn refined(fine: f64, until: f64, coarse: f64) -> Self {
        Self { segments: vec![(until, fine), (f64::INFINITY, coarse)] }
    }

    /// `(until, h)` pairs; the last one extends to infinity.
    pub fn segments(&self) -> &[(f64, f64)] {
        &self.segments
    }

    fn validate(&self) -> Result<()> {
        if self.segments.iter().any(|&(_, h)| !(h.is_finite() && h > 0.0)) {
            return Err(Error::InvalidInput("step size must be positive".into()));
        }
        Ok(())
    }

    /// Grid points from `t0` to `t1` inclusive. Each segment is split into
    /// equal steps no longer than its nominal step.
    pub fn grid(&self, t0: f64, t1: f64) -> Vec<f64> {
        let mut times = vec![t0];
        let mut start = t0;
        for &(until, h) in &self.segments {
            if start >= t1 {
                break;
            }
            let end = until.min(t1);
            if end <= start {
                continue;
            }
            let len = end - start;
            let n = ((len / h) - 1e-9).ceil().max(1.0) as usize;
            for k in 1..=n {
                times.push(if k == n { end } else { start + len * k as f64 / n as f64 });
            }
            start = end;
        }
        times
    }
}

/// Written as `h` for a uniform schedule or `h1@t1,h2@t2,...,h` otherwise.
impl fmt::Display for StepSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .segments
            .iter()
            .map(|&(until, h)| if until.is_finite() { format!("{h}@{until}") } else { format!("{h}") })
            .collect();
        f.write_str(&parts.join(","))
    }
}

impl FromStr for StepSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid step schedule '{s}'"));
        let mut segments = Vec::new();
        for part in s.split(',').map(str::trim) {
            let (h, until) = match part.split_once('@') {
                Some((h, u)) => (h.trim(), u.trim().parse::<f64>().map_err(|_| bad())?),
                None => (part, f64::INFINITY),
            };
            segments.push((until, h.parse::<f64>().map_err(|_| bad())?));
        }
        let ordered = segments.windows(2).all(|w| w[0].0 < w[1].0);
        if !ordered || segments.last().is_none_or(|l| l.0.is_finite()) {
            return Err(bad());
        }
        let schedule = Self { segments };
        schedule.validate().map_err(|_| bad())?;
        Ok(schedule)
    }
}

/// States and derivatives on an integration grid.
#[derive(Debug, Clone)]
pub struct Trajectory {
    times: Vec<f64>,
    dim: usize,
    states: Vec<f64>,
    derivs: Vec<f64>,
}

impl Trajectory {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// State at grid point `k`.
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Values of component `i` along the grid.
    pub fn component(&self, i: usize) -> Vec<f64> {
        (0..self.len()).map(|k| self.states[k * self.dim + i]).collect()
    }

    /// Cubic Hermite interpolation of the full state at `t`.
    pub fn at(&self, t: f64, out: &mut [f64]) -> Result<()> {
        let (t0, t1) = (self.times[0], self.times[self.len() - 1]);
        let tol = 1e-9 * (1.0 + t1.abs());
        if t < t0 - tol || t > t1 + tol {
            return Err(Error::InvalidInput(format!("time {t} outside [{t0}, {t1}]")));
        }
        if self.len() == 1 {
            out.copy_from_slice(self.state(0));
            return Ok(());
        }
        let k = match self.times.partition_point(|&s| s <= t) {
            0 => 0,
            p => (p - 1).min(self.len() - 2),
        };
        let (ta, tb) = (self.times[k], self.times[k + 1]);
        let h = tb - ta;
        let s = ((t - ta) / h).clamp(0.0, 1.0);
        let s2 = s * s;
        let s3 = s2 * s;
        let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
        let h10 = s3 - 2.0 * s2 + s;
        let h01 = -2.0 * s3 + 3.0 * s2;
        let h11 = s3 - s2;
        let (xa, xb) = (self.state(k), self.state(k + 1));
        let da = &self.derivs[k * self.dim..(k + 1) * self.dim];
        let db = &self.derivs[(k + 1) * self.dim..(k + 2) * self.dim];
        for i in 0..self.dim {
            out[i] = h00 * xa[i] + h10 * h * da[i] + h01 * xb[i] + h11 * h * db[i];
        }
        Ok(())
    }

    /// Full states at each query time, one row per time.
    pub fn sample(&self, times: &[f64]) -> Result<Vec<Vec<f64>>> {
        times
            .iter()
            .map(|&t| {
                let mut row = vec![0.0; self.dim];
                self.at(t, &mut row)?;
                Ok(row)
            })
            .collect()
    }
}

/// Classical RK4 with uniform step `h` over `span`.
pub fn integrate(system: &OdeSystem, theta: &[f64], init: &[f64], span: (f64, f64), h: f64) -> Result<Trajectory> {
    integrate_with(system, theta, init, span, &StepSchedule::uniform(h))
}

/// Classical RK4 over `span` on the grid generated by `schedule`.
pub fn integrate_with(
    system: &OdeSystem,
    theta: &[f64],
    init: &[f64],
    span: (f64, f64),
    schedule: &StepSchedule,
) -> Result<Trajectory> {
    let dim = system.state_dim();
    if init.len() != dim {
        return Err(Error::Dimension(format!("initial state has {} entries, system has {dim}", init.len())));
    }
    if theta.len() != system.param_dim() {
        return Err(Error::Dimension(format!("{} parameters given, system has {}", theta.len(), system.param_dim())));
    }
    if !(span.1 >= span.0) {
        return Err(Error::InvalidInput(format!("invalid span [{}, {}]", span.0, span.1)));
    }
    schedule.validate()?;

    let times = schedule.grid(span.0, span.1);
    let n = times.len();
    let mut states = Vec::with_capacity(n * dim);
    let mut derivs = Vec::with_capacity(n * dim);
    check_finite(init, span.0)?;
    states.extend_from_slice(init);

    let mut x = init.to_vec();
    let mut k1 = vec![0.0; dim];
    let mut k2 = vec![0.0; dim];
    let mut k3 = vec![0.0; dim];
    let mut k4 = vec![0.0; dim];
    let mut tmp = vec![0.0; dim];
    system.rhs(&x, theta, &mut k1);
    check_finite(&k1, span.0)?;
    derivs.extend_from_slice(&k1);

    for w in times.windows(2) {
        let h = w[1] - w[0];
        // k1 holds f(x) at the current point
        for i in 0..dim {
            tmp[i] = x[i] + 0.5 * h * k1[i];
        }
        system.rhs(&tmp, theta, &mut k2);
        for i in 0..dim {
            tmp[i] = x[i] + 0.5 * h * k2[i];
        }
        system.rhs(&tmp, theta, &mut k3);
        for i in 0..dim {
            tmp[i] = x[i] + h * k3[i];
        }
        system.rhs(&tmp, theta, &mut k4);
        for i in 0..dim {
            x[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        check_finite(&x, w[1])?;
        system.rhs(&x, theta, &mut k1);
        check_finite(&k1, w[1])?;
        states.extend_from_slice(&x);
        derivs.extend_from_slice(&k1);
    }

    Ok(Trajectory { times, dim, states, derivs })
}

fn check_finite(x: &[f64], t: f64) -> Result<()> {
    match x.iter().position(|v| !v.is_finite() || v.abs() > BLOWUP_LIMIT) {
        Some(component) => Err(Error::BlowUp { t, component }),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn decay() -> OdeSystem {
        OdeSystem::new("decay", 1, 0, |x, _, dx| dx[0] = -x[0])
    }

    #[test]
    fn exponential_decay() {
        let traj = integrate(&decay(), &[], &[1.0], (0.0, 1.0), 1e-3).unwrap();
        assert!((traj.last()[0] - (-1f64).exp()).abs() < 1e-8);
        assert_abs_diff_eq!(traj.last()[0], 0.367879, epsilon = 1e-6);
    }

    #[test]
    fn fourth_order_convergence() {
        let errs: Vec<f64> = [1e-2, 5e-3, 2.5e-3]
            .iter()
            .map(|&h| {
                let t = integrate(&decay(), &[], &[1.0], (0.0, 1.0), h).unwrap();
                (t.last()[0] - (-1f64).exp()).abs()
            })
            .collect();
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!((8.0..=32.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn rhs_substitutions() {
        let lv = lotka_volterra();
        assert_eq!(lv.derivative(&[5.0, 3.0], &[2.0, 1.0, 4.0, 1.0]), vec![-5.0, 3.0]);

        let pt = protein_transduction();
        let d = pt.derivative(&[1.0, 0.0, 1.0, 0.0, 0.0], &[0.07, 0.6, 0.05, 0.3, 0.017, 0.3]);
        for (a, b) in d.iter().zip([-0.67, 0.07, -0.6, 0.6, 0.0]) {
            assert_abs_diff_eq!(*a, b, epsilon = 1e-15);
        }

        let fhn = fitzhugh_nagumo(FhnVariant::AsPrinted);
        let d = fhn.derivative(&[0.0, 0.0], &[0.2, 0.2, 3.0]);
        assert_abs_diff_eq!(d[0], 0.0);
        assert_abs_diff_eq!(d[1], -1.0, epsilon = 1e-15);

        let std = fitzhugh_nagumo(FhnVariant::Standard);
        let d = std.derivative(&[0.0, 0.0], &[0.2, 0.2, 3.0]);
        assert_abs_diff_eq!(d[1], 0.2 / 3.0, epsilon = 1e-15);
    }

    #[test]
    fn pt_conservation_of_receptor() {
        let pt = protein_transduction();
        let th = [0.07, 0.6, 0.05, 0.3, 0.017, 0.3];
        for x in [[1.0, 0.0, 1.0, 0.0, 0.0], [0.3, 0.2, 0.5, 0.7, 0.1], [2.0, 1.0, 0.1, 0.05, 3.0]] {
            let d = pt.derivative(&x, &th);
            assert_abs_diff_eq!(d[2] + d[3] + d[4], 0.0, epsilon = 1e-15);
        }
        let traj = integrate(&pt, &th, &[1.0, 0.0, 1.0, 0.0, 0.0], (0.0, 100.0), 0.01).unwrap();
        for k in 0..traj.len() {
            let s = traj.state(k);
            assert!((s[2] + s[3] + s[4] - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn lv_matches_step_halving_oracle() {
        let lv = lotka_volterra();
        let th = [2.0, 1.0, 4.0, 1.0];
        let coarse = integrate(&lv, &th, &[5.0, 3.0], (0.0, 2.0), 1e-3).unwrap();
        let fine = integrate(&lv, &th, &[5.0, 3.0], (0.0, 2.0), 5e-4).unwrap();
        let mut max_err: f64 = 0.0;
        for k in 0..coarse.len() {
            let a = coarse.state(k);
            let b = fine.state(2 * k);
            for i in 0..2 {
                // Richardson: error of the coarse solution ≈ (16/15)(coarse − fine)
                max_err = max_err.max((a[i] - b[i]).abs() * 16.0 / 15.0);
            }
        }
        assert!(max_err < 1e-6, "max err {max_err}");
    }

    #[test]
    fn lv_stays_positive() {
        let traj = integrate(&lotka_volterra(), &[2.0, 1.0, 4.0, 1.0], &[5.0, 3.0], (0.0, 2.0), 1e-3).unwrap();
        assert!((0..traj.len()).all(|k| traj.state(k).iter().all(|&v| v > 0.0)));
    }

    #[test]
    fn printed_fhn_blows_up_at_benchmark_parameters() {
        let fhn = fitzhugh_nagumo(FhnVariant::AsPrinted);
        let res = integrate(&fhn, &[0.2, 0.2, 3.0], &[-1.0, 1.0], (0.0, 10.0), 0.01);
        assert!(matches!(res, Err(Error::BlowUp { .. })));
        let std = fitzhugh_nagumo(FhnVariant::Standard);
        assert!(integrate(&std, &[0.2, 0.2, 3.0], &[-1.0, 1.0], (0.0, 10.0), 0.01).is_ok());
    }

    #[test]
    fn hermite_output_is_fourth_order_between_nodes() {
        let traj = integrate(&decay(), &[], &[1.0], (0.0, 2.0), 0.01).unwrap();
        let mut out = [0.0];
        for &t in &[0.005, 0.333, 1.2345, 1.999] {
            traj.at(t, &mut out).unwrap();
            assert!((out[0] - (-t).exp()).abs() < 1e-9, "t={t}");
        }
        assert!(traj.at(2.5, &mut out).is_err());
    }

    #[test]
    fn refined_schedule_grid() {
        let g = StepSchedule::refined(0.01, 1.0, 0.05).grid(0.0, 100.0);
        assert_eq!(g.len(), 1 + 100 + 1980);
        assert_eq!(*g.last().unwrap(), 100.0);
        assert!(g.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(StepSchedule::uniform(0.3).grid(0.0, 1.0).len(), 5);
    }

    #[test]
    fn partition_validation() {
        let lv = lotka_volterra();
        let p = lv.clone().with_partition(&[0], &[3.0]).unwrap();
        assert_eq!(p.latent_idx(), &[1]);
        assert_eq!(p.assemble_init(&[5.0]), vec![5.0, 3.0]);
        assert!(lv.clone().with_partition(&[0], &[]).is_err());
        assert!(lv.clone().with_partition(&[2], &[1.0, 1.0]).is_err());
        assert!(lv.with_partition(&[], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn schedule_text_round_trip() {
        for sched in [StepSchedule::uniform(0.005), StepSchedule::refined(0.01, 1.0, 0.05)] {
            let text = sched.to_string();
            assert_eq!(text.parse::<StepSchedule>().unwrap(), sched);
        }
        assert_eq!(StepSchedule::refined(0.01, 1.0, 0.05).to_string(), "0.01@1,0.05");
        for bad in ["", "0.01@1", "x", "-1", "0.1@2,0.2@1,0.3"] {
            assert!(bad.parse::<StepSchedule>().is_err(), "{bad}");
        }
    }
}
