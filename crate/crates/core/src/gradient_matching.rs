//! Joint density of observed states and parameters under partial observation.
//!
//! For each observed component `k` the GP prior induces a Gaussian conditional
//! for the state derivatives, `ẋ_k | x_k ~ N(D_k (x_k − μ_k), A_k)` with
//!
//! ```text
//! D_k = C(ẋ, x) C(x, x)⁻¹
//! A_k = C(ẋ, ẋ) − C(ẋ, x) C(x, x)⁻¹ C(x, ẋ)
//! ```
//!
//! The score used for sampling is
//!
//! ```text
//! log ρ(θ) + Σ_k [ log N(x_k − μ_k | 0, C_k) + log N(y_k | x_k, σ_k² I)
//!                + log N(f_k(x_M, x̃_L, θ) | D_k (x_k − μ_k), A_k + γ I) ]
//! ```
//!
//! where the latent states `x̃_L` come from integrating the full system from
//! the current observed initial values and the known latent initial values.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::gp_regression::KernelModel;
use crate::linalg::{log_normal_isotropic, Factor};
use crate::observations::ObservationSet;
use crate::ode_core::{integrate_with, OdeSystem, StepSchedule};

/// Independent uniform prior on a box.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterPrior {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl ParameterPrior {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::Dimension("prior bounds of different lengths".into()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l.is_finite() && u.is_finite() && u > l)) {
            return Err(Error::InvalidInput(format!("invalid prior box {lower:?} .. {upper:?}")));
        }
        Ok(Self { lower, upper })
    }

    /// `[0, 10·|θ_j|]` per component (unit width for zero entries).
    pub fn around(theta_scale: &[f64]) -> Self {
        Self {
            lower: vec![0.0; theta_scale.len()],
            upper: theta_scale.iter().map(|t| if *t == 0.0 { 1.0 } else { 10.0 * t.abs() }).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn contains(&self, theta: &[f64]) -> bool {
        theta.len() == self.lower.len()
            && theta.iter().zip(&self.lower).zip(&self.upper).all(|((t, l), u)| t >= l && t <= u)
    }

    pub fn widths(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| u - l).collect()
    }

    pub fn log_density(&self, theta: &[f64]) -> f64 {
        if self.contains(theta) {
            -self.widths().iter().map(|w| w.ln()).sum::<f64>()
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Per-observed-state matrices of the derivative conditional.
#[derive(Debug, Clone)]
pub struct StateBlock {
    model: KernelModel,
    d: DMatrix<f64>,
    a: DMatrix<f64>,
    prior: Factor,
    matching: Factor,
}

impl StateBlock {
    fn new(model: KernelModel, gamma: f64) -> Result<Self> {
        let times = model.times();
        let n = times.len();
        let spec = model.spec();
        let mut c_x_dx = DMatrix::zeros(n, n);
        let mut c_dx_dx = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                c_x_dx[(i, j)] = spec.eval_db(times[i], times[j]);
                c_dx_dx[(i, j)] = spec.eval_dadb(times[i], times[j]);
            }
        }
        let prior = Factor::new(model.gram())?;
        // D = C(ẋ,x) C(x,x)⁻¹ = (C(x,x)⁻¹ C(x,ẋ))ᵀ
        let d = prior.solve_matrix(&c_x_dx).transpose();
        let mut a = &c_dx_dx - &d * &c_x_dx;
        let a_sym = (&a + a.transpose()) * 0.5;
        a = a_sym;
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += gamma;
        }
        let matching = Factor::new(&shifted)?;
        Ok(Self { model, d, a, prior, matching })
    }

    pub fn model(&self) -> &KernelModel {
        &self.model
    }

    /// `C(ẋ, x) C(x, x)⁻¹`.
    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    /// Conditional covariance of the derivatives, without model noise.
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    /// Jitter added to `C(x, x)` in its factorization.
    pub fn prior_jitter(&self) -> f64 {
        self.prior.jitter()
    }

    /// Jitter added to `A + γI` in its factorization.
    pub fn matching_jitter(&self) -> f64 {
        self.matching.jitter()
    }

    /// `log N(x − μ | 0, C) + log N(y | x, σ²I)`.
    pub fn state_term(&self, x: &DVector<f64>, y: &DVector<f64>) -> f64 {
        let mu = self.model.mean();
        let centered = x.map(|v| v - mu);
        let sigma = self.model.sigma().max(f64::MIN_POSITIVE.sqrt());
        self.prior.log_normal(&centered) + log_normal_isotropic(y, x, sigma * sigma)
    }

    /// `log N(f | D (x − μ), A + γI)`.
    pub fn matching_term(&self, x: &DVector<f64>, f: &DVector<f64>) -> f64 {
        let mu = self.model.mean();
        let centered = x.map(|v| v - mu);
        let residual = f - &self.d * centered;
        self.matching.log_normal(&residual)
    }
}

/// Everything needed to evaluate the derivative-matching density: one block
/// per observed state (in `observed_idx` order) and the model noise `γ`.
#[derive(Debug, Clone)]
pub struct GradientMatchContext {
    blocks: Vec<StateBlock>,
    gamma: f64,
}

/// Builds `D_k`, `A_k` and the cached factorizations for each observed state.
pub fn build_context(models: Vec<KernelModel>, gamma: f64) -> Result<GradientMatchContext> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::InvalidInput(format!("gamma must be positive, got {gamma}")));
    }
    if models.is_empty() {
        return Err(Error::InvalidInput("no observed states".into()));
    }
    let n = models[0].times().len();
    if models.iter().any(|m| m.times().len() != n) {
        return Err(Error::Dimension("observed states must share one time grid".into()));
    }
    let blocks = models.into_iter().map(|m| StateBlock::new(m, gamma)).collect::<Result<_>>()?;
    Ok(GradientMatchContext { blocks, gamma })
}

impl GradientMatchContext {
    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn blocks(&self) -> &[StateBlock] {
        &self.blocks
    }

    pub fn n_observed(&self) -> usize {
        self.blocks.len()
    }

    pub fn n_times(&self) -> usize {
        self.blocks[0].model.times().len()
    }
}

/// The scoring problem: context, system, data, prior and integration grid.
#[derive(Debug, Clone)]
pub struct JointDensity {
    ctx: GradientMatchContext,
    system: OdeSystem,
    y: ObservationSet,
    y_vecs: Vec<DVector<f64>>,
    prior: ParameterPrior,
    schedule: StepSchedule,
}

/// Latent values at the observation times, `latent[i][l]`, or `None` when the
/// integration blew up.
pub type LatentValues = Option<Vec<Vec<f64>>>;

impl JointDensity {
    pub fn new(
        ctx: GradientMatchContext,
        system: OdeSystem,
        y: ObservationSet,
        prior: ParameterPrior,
        schedule: StepSchedule,
    ) -> Result<Self> {
        if y.observed_idx != system.observed_idx() {
            return Err(Error::Dimension(format!(
                "data observes {:?}, system observes {:?}",
                y.observed_idx,
                system.observed_idx()
            )));
        }
        if ctx.n_observed() != y.n_observed() || ctx.n_times() != y.len() {
            return Err(Error::Dimension("context does not match observations".into()));
        }
        if prior.dim() != system.param_dim() {
            return Err(Error::Dimension(format!(
                "prior has {} components, system has {} parameters",
                prior.dim(),
                system.param_dim()
            )));
        }
        if !system.latent_idx().is_empty() && y.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidInput("latent integration needs increasing times".into()));
        }
        let y_vecs = y.values.iter().map(|v| DVector::from_column_slice(v)).collect();
        Ok(Self { ctx, system, y, y_vecs, prior, schedule })
    }

    pub fn context(&self) -> &GradientMatchContext {
        &self.ctx
    }

    pub fn system(&self) -> &OdeSystem {
        &self.system
    }

    pub fn observations(&self) -> &ObservationSet {
        &self.y
    }

    pub fn prior(&self) -> &ParameterPrior {
        &self.prior
    }

    pub fn schedule(&self) -> &StepSchedule {
        &self.schedule
    }

    fn check_dims(&self, x_m: &[Vec<f64>], theta: &[f64]) -> Result<()> {
        if x_m.len() != self.ctx.n_observed() || x_m.iter().any(|x| x.len() != self.y.len()) {
            return Err(Error::Dimension(format!(
                "x_M must be {} series of length {}",
                self.ctx.n_observed(),
                self.y.len()
            )));
        }
        if theta.len() != self.system.param_dim() {
            return Err(Error::Dimension(format!(
                "theta has {} entries, system has {} parameters",
                theta.len(),
                self.system.param_dim()
            )));
        }
        Ok(())
    }

    /// Integrates from `(x_M(t₀), x_L(t₀))` and returns the latent components
    /// at the observation times.
    pub fn latent_values(&self, observed_init: &[f64], theta: &[f64]) -> LatentValues {
        let latent = self.system.latent_idx();
        if latent.is_empty() {
            return Some(vec![Vec::new(); self.y.len()]);
        }
        let init = self.system.assemble_init(observed_init);
        let traj = integrate_with(&self.system, theta, &init, self.y.span(), &self.schedule).ok()?;
        let mut out = Vec::with_capacity(self.y.len());
        let mut full = vec![0.0; self.system.state_dim()];
        for &t in &self.y.times {
            traj.at(t, &mut full).ok()?;
            out.push(latent.iter().map(|&l| full[l]).collect());
        }
        Some(out)
    }

    /// GP prior plus observation likelihood for observed block `k`.
    pub fn state_term(&self, k: usize, x_k: &[f64]) -> f64 {
        self.ctx.blocks[k].state_term(&DVector::from_column_slice(x_k), &self.y_vecs[k])
    }

    /// Sum over observed blocks of the derivative-matching term.
    pub fn matching_term(&self, x_m: &[Vec<f64>], latent: &[Vec<f64>], theta: &[f64]) -> f64 {
        let n = self.y.len();
        let obs = self.system.observed_idx();
        let lat = self.system.latent_idx();
        let mut f = vec![DVector::zeros(n); obs.len()];
        let mut full = vec![0.0; self.system.state_dim()];
        let mut dx = vec![0.0; self.system.state_dim()];
        for i in 0..n {
            for (k, &c) in obs.iter().enumerate() {
                full[c] = x_m[k][i];
            }
            for (l, &c) in lat.iter().enumerate() {
                full[c] = latent[i][l];
            }
            self.system.rhs(&full, theta, &mut dx);
            for (k, &c) in obs.iter().enumerate() {
                f[k][i] = dx[c];
            }
        }
        let mut total = 0.0;
        for (k, block) in self.ctx.blocks.iter().enumerate() {
            let fk = &f[k];
            if fk.iter().any(|v| !v.is_finite()) {
                return f64::NEG_INFINITY;
            }
            total += block.matching_term(&DVector::from_column_slice(&x_m[k]), fk);
        }
        total
    }

    /// Full log joint density; `−∞` outside the prior or when integration fails.
    pub fn log_density(&self, x_m: &[Vec<f64>], theta: &[f64]) -> Result<f64> {
        self.check_dims(x_m, theta)?;
        let lp = self.prior.log_density(theta);
        if lp == f64::NEG_INFINITY {
            return Ok(lp);
        }
        let init: Vec<f64> = x_m.iter().map(|x| x[0]).collect();
        let Some(latent) = self.latent_values(&init, theta) else {
            return Ok(f64::NEG_INFINITY);
        };
        let states: f64 = (0..x_m.len()).map(|k| self.state_term(k, &x_m[k])).sum();
        let total = lp + states + self.matching_term(x_m, &latent, theta);
        Ok(if total.is_nan() { f64::NEG_INFINITY } else { total })
    }
}

/// One-shot evaluation of the joint log-density.
///
/// `system` must carry the observed/latent partition and latent initial values.
pub fn log_joint_density(
    ctx: &GradientMatchContext,
    system: &OdeSystem,
    x_m: &[Vec<f64>],
    theta: &[f64],
    y: &ObservationSet,
    prior: &ParameterPrior,
    schedule: &StepSchedule,
) -> Result<f64> {
    JointDensity::new(ctx.clone(), system.clone(), y.clone(), prior.clone(), schedule.clone())?.log_density(x_m, theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelFamily, KernelSpec};
    use crate::ode_core::{integrate, lotka_volterra};
    use approx::assert_abs_diff_eq;

    fn se_model(times: Vec<f64>, var: f64, l: f64, sigma: f64, mean: f64) -> KernelModel {
        KernelModel::new(KernelSpec::squared_exponential(var, l).unwrap(), sigma, times, mean).unwrap()
    }

    #[test]
    fn single_point_blocks() {
        let ctx = build_context(vec![se_model(vec![0.0], 1.0, 1.0, 0.1, 0.0)], 0.5).unwrap();
        let b = &ctx.blocks()[0];
        assert_abs_diff_eq!(b.d()[(0, 0)], 0.0);
        assert_abs_diff_eq!(b.a()[(0, 0)], 1.0);
    }

    #[test]
    fn two_point_blocks_match_explicit_algebra() {
        let ctx = build_context(vec![se_model(vec![0.0, 1.0], 1.0, 1.0, 0.1, 0.0)], 0.3).unwrap();
        let b = &ctx.blocks()[0];
        let j = b.prior_jitter();
        let e = (-0.5f64).exp();
        // closed forms for the SE kernel with unit variance and length-scale
        let cxx = DMatrix::from_row_slice(2, 2, &[1.0 + j, e, e, 1.0 + j]);
        let cdx_x = DMatrix::from_row_slice(2, 2, &[0.0, e, -e, 0.0]);
        let cdx_dx = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let inv = cxx.try_inverse().unwrap();
        let d = &cdx_x * &inv;
        let a = &cdx_dx - &d * cdx_x.transpose();
        for (x, y) in b.d().iter().zip(d.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-10);
        }
        for (x, y) in b.a().iter().zip(a.iter()) {
            assert_abs_diff_eq!(*x, *y, epsilon = 1e-10);
        }
    }

    #[test]
    fn a_is_the_schur_complement() {
        let times: Vec<f64> = (0..7).map(|i| 0.4 * i as f64).collect();
        let spec = KernelSpec::matern52(1.5, 0.9).unwrap();
        let model = KernelModel::new(spec.clone(), 0.05, times.clone(), 0.0).unwrap();
        let ctx = build_context(vec![model], 0.1).unwrap();
        let b = &ctx.blocks()[0];
        let n = times.len();
        let mut cxx = spec.gram(&times);
        for i in 0..n {
            cxx[(i, i)] += b.prior_jitter();
        }
        let inv = cxx.try_inverse().unwrap();
        let cdx_x = DMatrix::from_fn(n, n, |i, j| spec.eval_da(times[i], times[j]));
        let cx_dx = DMatrix::from_fn(n, n, |i, j| spec.eval_db(times[i], times[j]));
        let cdx_dx = DMatrix::from_fn(n, n, |i, j| spec.eval_dadb(times[i], times[j]));
        let a = cdx_dx - &cdx_x * &inv * cx_dx;
        for i in 0..n {
            for j in 0..n {
                assert!((b.a()[(i, j)] - a[(i, j)]).abs() < 1e-8 * a.amax().max(1.0));
            }
        }
        assert!((b.a() - b.a().transpose()).amax() == 0.0);
    }

    #[test]
    fn prior_box() {
        let p = ParameterPrior::around(&[2.0, 1.0]);
        assert_eq!(p.upper, vec![20.0, 10.0]);
        assert_abs_diff_eq!(p.log_density(&[1.0, 1.0]), -(200f64.ln()), epsilon = 1e-12);
        assert_eq!(p.log_density(&[-0.1, 1.0]), f64::NEG_INFINITY);
        assert!(ParameterPrior::new(vec![1.0], vec![0.0]).is_err());
    }

    fn lv_problem(gamma: f64) -> (JointDensity, Vec<Vec<f64>>) {
        let system = lotka_volterra().with_partition(&[0], &[3.0]).unwrap();
        let times: Vec<f64> = (0..20).map(|i| 2.0 * i as f64 / 19.0).collect();
        let traj = integrate(&system, &[2.0, 1.0, 4.0, 1.0], &[5.0, 3.0], (0.0, 2.0), 1e-3).unwrap();
        let x1: Vec<f64> = traj.sample(&times).unwrap().iter().map(|r| r[0]).collect();
        let mean = x1.iter().sum::<f64>() / 20.0;
        let model = se_model(times.clone(), 2.0, 0.5, 0.1, mean);
        let ctx = build_context(vec![model], gamma).unwrap();
        let y = ObservationSet::new(times, vec![0], vec![x1.clone()]).unwrap();
        let jd = JointDensity::new(
            ctx,
            system,
            y,
            ParameterPrior::around(&[2.0, 1.0, 4.0, 1.0]),
            StepSchedule::uniform(0.005),
        )
        .unwrap();
        (jd, vec![x1])
    }

    #[test]
    fn deterministic_and_dimension_checked() {
        let (jd, x) = lv_problem(0.3);
        let a = jd.log_density(&x, &[2.0, 1.0, 4.0, 1.0]).unwrap();
        let b = jd.log_density(&x, &[2.0, 1.0, 4.0, 1.0]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(matches!(jd.log_density(&x, &[2.0, 1.0]), Err(Error::Dimension(_))));
        assert!(jd.log_density(&[vec![1.0; 3]], &[2.0, 1.0, 4.0, 1.0]).is_err());
    }

    #[test]
    fn outside_prior_is_minus_infinity() {
        let (jd, x) = lv_problem(0.3);
        assert_eq!(jd.log_density(&x, &[-1.0, 1.0, 4.0, 1.0]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn large_gamma_washes_out_parameters() {
        let mut gaps = Vec::new();
        for gamma in [1e0, 1e2, 1e4] {
            let (jd, x) = lv_problem(gamma);
            let a = jd.log_density(&x, &[2.0, 1.0, 4.0, 1.0]).unwrap();
            let b = jd.log_density(&x, &[2.0, 1.0, 4.0, 1.5]).unwrap();
            gaps.push((a - b).abs());
        }
        assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2], "{gaps:?}");
        assert!(gaps[2] < 1e-2 * gaps[0], "{gaps:?}");
    }

    #[test]
    fn true_parameters_beat_perturbed() {
        let (jd, x) = lv_problem(0.3);
        let a = jd.log_density(&x, &[2.0, 1.0, 4.0, 1.0]).unwrap();
        let b = jd.log_density(&x, &[2.0, 1.0, 4.0, 1.5]).unwrap();
        assert!(a > b);
    }

    #[test]
    fn full_observation_permutation_invariance() {
        let times = vec![0.0, 0.5, 1.1, 1.6, 2.0];
        let perm = [3, 0, 4, 1, 2];
        let x: Vec<f64> = times.iter().map(|t: &f64| 1.0 + t.sin()).collect();
        let y: Vec<f64> = x.iter().map(|v| v + 0.03).collect();
        let system = OdeSystem::new("logistic", 1, 1, |x, p, dx| dx[0] = p[0] * x[0] * (2.0 - x[0]));
        let prior = ParameterPrior::around(&[1.0]);
        let eval = |times: Vec<f64>, x: Vec<f64>, y: Vec<f64>| {
            let spec = KernelSpec::new(KernelFamily::Matern52, vec![1.0, 0.8]).unwrap();
            let ctx = build_context(vec![KernelModel::new(spec, 0.05, times.clone(), 1.2).unwrap()], 0.2).unwrap();
            let obs = ObservationSet { times, observed_idx: vec![0], values: vec![y] };
            let jd = JointDensity::new(ctx, system.clone(), obs, prior.clone(), StepSchedule::uniform(0.01)).unwrap();
            jd.log_density(&[x], &[0.7]).unwrap()
        };
        let base = eval(times.clone(), x.clone(), y.clone());
        let p = |v: &[f64]| perm.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let permuted = eval(p(&times), p(&x), p(&y));
        assert!((base - permuted).abs() < 1e-9 * base.abs().max(1.0), "{base} vs {permuted}");
    }
}
