//! One-chain Metropolis-within-Gibbs over observed states and parameters.
//!
//! Each sweep updates every observed-state coordinate and then every
//! parameter with a Gaussian random-walk proposal, accepting with the
//! Metropolis ratio of the joint density. One sample is stored per sweep; the
//! first `n_burnin` are discarded.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gp_regression::KernelModel;
use crate::gradient_matching::{JointDensity, LatentValues};

/// Sampler settings.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    /// Retained sweeps.
    pub n_samples: usize,
    /// Discarded leading sweeps.
    pub n_burnin: usize,
    /// State-proposal std, one per observed state or a single shared value.
    /// Empty means `0.075 · std(y_k)`.
    pub sigma_s: Vec<f64>,
    /// Parameter-proposal std, one per parameter or a single shared value.
    /// Empty means `0.05 · prior width`.
    pub sigma_p: Vec<f64>,
    pub seed: u64,
    /// Model noise used to build the gradient-matching context.
    pub gamma: f64,
    /// Skip latent re-integration when the initial-time state changes.
    pub strict_paper_caching: bool,
    /// Recompute the density from scratch every this many sweeps and record
    /// the largest disagreement with the cached value.
    pub coherence_check_every: Option<usize>,
    /// Uniform prior draws scored at the starting states; the chain starts
    /// from the best one.
    pub init_draws: usize,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            n_samples: 3500,
            n_burnin: 500,
            sigma_s: Vec::new(),
            sigma_p: Vec::new(),
            seed: 0,
            gamma: 0.3,
            strict_paper_caching: false,
            coherence_check_every: None,
            init_draws: 1,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sigma_s.iter().chain(&self.sigma_p).any(|s| !(s.is_finite() && *s > 0.0)) {
            return Err(Error::InvalidInput("proposal scales must be positive".into()));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::InvalidInput(format!("gamma must be positive, got {}", self.gamma)));
        }
        Ok(())
    }
}

/// A density over `(states, θ)` that can be rescored after a single-coordinate
/// change, reusing whatever it cached for the current point.
pub trait GibbsTarget {
    type Cache: Clone;

    fn n_states(&self) -> usize;
    fn n_params(&self) -> usize;

    /// Scores a point from scratch.
    fn evaluate(&self, states: &[f64], theta: &[f64]) -> (f64, Self::Cache);

    /// Scores the point after `states[coord]` changed.
    fn rescore_state(&self, states: &[f64], theta: &[f64], _coord: usize, _cache: &Self::Cache) -> (f64, Self::Cache) {
        self.evaluate(states, theta)
    }

    /// Scores the point after `theta[coord]` changed.
    fn rescore_param(&self, states: &[f64], theta: &[f64], _coord: usize, _cache: &Self::Cache) -> (f64, Self::Cache) {
        self.evaluate(states, theta)
    }
}

/// Wraps a plain log-density closure as a target without caching.
pub struct FnTarget<F> {
    n_states: usize,
    n_params: usize,
    f: F,
}

impl<F: Fn(&[f64], &[f64]) -> f64> FnTarget<F> {
    pub fn new(n_states: usize, n_params: usize, f: F) -> Self {
        Self { n_states, n_params, f }
    }
}

impl<F: Fn(&[f64], &[f64]) -> f64> GibbsTarget for FnTarget<F> {
    type Cache = ();

    fn n_states(&self) -> usize {
        self.n_states
    }

    fn n_params(&self) -> usize {
        self.n_params
    }

    fn evaluate(&self, states: &[f64], theta: &[f64]) -> (f64, ()) {
        ((self.f)(states, theta), ())
    }
}

/// Current point of the chain with its cached score.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainState {
    /// Observed-state values, block-major: `x_m[k * n + i]`.
    pub x_m: Vec<f64>,
    pub theta: Vec<f64>,
    pub log_density: f64,
}

/// One retained sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub x_m: Vec<f64>,
    pub theta: Vec<f64>,
    pub log_density: f64,
}

/// Parameters and score after every sweep, burn-in included.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub sweep: usize,
    pub theta: Vec<f64>,
    pub log_density: f64,
}

#[derive(Debug, Clone)]
pub struct ChainOutput {
    pub samples: Vec<Sample>,
    pub trace: Vec<TraceRow>,
    /// Acceptance rate per state coordinate.
    pub state_acceptance: Vec<f64>,
    /// Acceptance rate per parameter.
    pub param_acceptance: Vec<f64>,
    pub initial: ChainState,
    pub last: ChainState,
    /// Largest `|cached − recomputed|` seen by the coherence check.
    pub cache_drift: f64,
}

impl ChainOutput {
    pub fn mean_state_acceptance(&self) -> f64 {
        mean(&self.state_acceptance)
    }

    pub fn mean_param_acceptance(&self) -> f64 {
        mean(&self.param_acceptance)
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Proposal scales and chain length for [`sample_chain`].
#[derive(Debug, Clone)]
pub struct SamplerSettings {
    pub state_scales: Vec<f64>,
    pub param_scales: Vec<f64>,
    pub n_samples: usize,
    pub n_burnin: usize,
    pub coherence_check_every: Option<usize>,
}

fn accept<R: Rng>(rng: &mut R, proposed: f64, current: f64) -> bool {
    if proposed == f64::NEG_INFINITY || proposed.is_nan() {
        return false;
    }
    if current == f64::NEG_INFINITY {
        return true;
    }
    let u: f64 = rng.random();
    u.ln() < proposed - current
}

/// Runs Metropolis-within-Gibbs on any [`GibbsTarget`].
pub fn sample_chain<T: GibbsTarget, R: Rng>(
    target: &T,
    init_states: Vec<f64>,
    init_theta: Vec<f64>,
    settings: &SamplerSettings,
    rng: &mut R,
) -> Result<ChainOutput> {
    let (ns, np) = (target.n_states(), target.n_params());
    if init_states.len() != ns || init_theta.len() != np {
        return Err(Error::Dimension("initial point does not match target".into()));
    }
    if settings.state_scales.len() != ns || settings.param_scales.len() != np {
        return Err(Error::Dimension("proposal scales do not match target".into()));
    }

    let mut states = init_states;
    let mut theta = init_theta;
    let (mut current, mut cache) = target.evaluate(&states, &theta);
    let initial = ChainState { x_m: states.clone(), theta: theta.clone(), log_density: current };

    let total = settings.n_samples + settings.n_burnin;
    let mut state_acc = vec![0usize; ns];
    let mut param_acc = vec![0usize; np];
    let mut samples = Vec::with_capacity(settings.n_samples);
    let mut trace = Vec::with_capacity(total);
    let mut drift: f64 = 0.0;

    for sweep in 0..total {
        for c in 0..ns {
            let old = states[c];
            let step: f64 = rng.sample(StandardNormal);
            states[c] = old + settings.state_scales[c] * step;
            let (proposed, new_cache) = target.rescore_state(&states, &theta, c, &cache);
            if accept(rng, proposed, current) {
                current = proposed;
                cache = new_cache;
                state_acc[c] += 1;
            } else {
                states[c] = old;
            }
        }
        for j in 0..np {
            let old = theta[j];
            let step: f64 = rng.sample(StandardNormal);
            theta[j] = old + settings.param_scales[j] * step;
            let (proposed, new_cache) = target.rescore_param(&states, &theta, j, &cache);
            if accept(rng, proposed, current) {
                current = proposed;
                cache = new_cache;
                param_acc[j] += 1;
            } else {
                theta[j] = old;
            }
        }

        if let Some(every) = settings.coherence_check_every {
            if every > 0 && sweep % every == 0 {
                let (fresh, _) = target.evaluate(&states, &theta);
                if fresh.is_finite() || current.is_finite() {
                    drift = drift.max((fresh - current).abs());
                }
            }
        }

        trace.push(TraceRow { sweep, theta: theta.clone(), log_density: current });
        if sweep >= settings.n_burnin {
            samples.push(Sample { x_m: states.clone(), theta: theta.clone(), log_density: current });
        }
    }

    let rate = |counts: Vec<usize>| -> Vec<f64> {
        counts.into_iter().map(|a| if total == 0 { 0.0 } else { a as f64 / total as f64 }).collect()
    };
    Ok(ChainOutput {
        samples,
        trace,
        state_acceptance: rate(state_acc),
        param_acceptance: rate(param_acc),
        initial,
        last: ChainState { x_m: states, theta, log_density: current },
        cache_drift: drift,
    })
}

/// Cached pieces of the joint density at the current point.
#[derive(Debug, Clone)]
pub struct DensityCache {
    latent: LatentValues,
    state_terms: Vec<f64>,
    matching: f64,
    prior: f64,
}

impl DensityCache {
    fn total(&self) -> f64 {
        if self.latent.is_none() || self.prior == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let t = self.prior + self.state_terms.iter().sum::<f64>() + self.matching;
        if t.is_nan() {
            f64::NEG_INFINITY
        } else {
            t
        }
    }
}

/// The gradient-matching density as a Gibbs target with latent caching.
///
/// Latent states are re-integrated on every parameter proposal and, unless
/// `strict_paper_caching` is set, on proposals to an observed state at the
/// first observation time.
pub struct MatchingTarget<'a> {
    density: &'a JointDensity,
    n_times: usize,
    strict_paper_caching: bool,
}

impl<'a> MatchingTarget<'a> {
    pub fn new(density: &'a JointDensity, strict_paper_caching: bool) -> Self {
        Self { density, n_times: density.observations().len(), strict_paper_caching }
    }

    fn split(&self, states: &[f64]) -> Vec<Vec<f64>> {
        states.chunks(self.n_times).map(|c| c.to_vec()).collect()
    }

    fn initial_values(&self, states: &[f64]) -> Vec<f64> {
        states.iter().step_by(self.n_times).copied().collect()
    }

    fn matching(&self, x_m: &[Vec<f64>], latent: &LatentValues, theta: &[f64]) -> f64 {
        match latent {
            Some(l) => self.density.matching_term(x_m, l, theta),
            None => f64::NEG_INFINITY,
        }
    }
}

impl GibbsTarget for MatchingTarget<'_> {
    type Cache = DensityCache;

    fn n_states(&self) -> usize {
        self.n_times * self.density.context().n_observed()
    }

    fn n_params(&self) -> usize {
        self.density.system().param_dim()
    }

    fn evaluate(&self, states: &[f64], theta: &[f64]) -> (f64, DensityCache) {
        let prior = self.density.prior().log_density(theta);
        let x_m = self.split(states);
        let state_terms = (0..x_m.len()).map(|k| self.density.state_term(k, &x_m[k])).collect();
        let latent = if prior == f64::NEG_INFINITY {
            None
        } else {
            self.density.latent_values(&self.initial_values(states), theta)
        };
        let matching = self.matching(&x_m, &latent, theta);
        let cache = DensityCache { latent, state_terms, matching, prior };
        (cache.total(), cache)
    }

    fn rescore_state(&self, states: &[f64], theta: &[f64], coord: usize, cache: &DensityCache) -> (f64, DensityCache) {
        let (k, i) = (coord / self.n_times, coord % self.n_times);
        let x_m = self.split(states);
        let mut next = cache.clone();
        next.state_terms[k] = self.density.state_term(k, &x_m[k]);
        let has_latent = !self.density.system().latent_idx().is_empty();
        if i == 0 && has_latent && !self.strict_paper_caching && cache.prior != f64::NEG_INFINITY {
            next.latent = self.density.latent_values(&self.initial_values(states), theta);
        }
        next.matching = self.matching(&x_m, &next.latent, theta);
        (next.total(), next)
    }

    fn rescore_param(&self, states: &[f64], theta: &[f64], _coord: usize, cache: &DensityCache) -> (f64, DensityCache) {
        let prior = self.density.prior().log_density(theta);
        if prior == f64::NEG_INFINITY {
            let mut next = cache.clone();
            next.prior = prior;
            return (f64::NEG_INFINITY, next);
        }
        let x_m = self.split(states);
        let latent = self.density.latent_values(&self.initial_values(states), theta);
        let matching = self.matching(&x_m, &latent, theta);
        let next = DensityCache { latent, state_terms: cache.state_terms.clone(), matching, prior };
        (next.total(), next)
    }
}

fn broadcast(values: &[f64], n: usize, what: &str) -> Result<Vec<f64>> {
    match values.len() {
        1 => Ok(vec![values[0]; n]),
        m if m == n => Ok(values.to_vec()),
        m => Err(Error::Dimension(format!("{m} {what} scales for {n} entries"))),
    }
}

fn sample_std(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt()
}

/// Runs the sampler on the gradient-matching density.
///
/// Observed states start at the GP posterior mean of the data. Parameters
/// start at the best of `init_draws` uniform draws from the prior box, scored
/// at those states; draws continue (up to 1000) while no finite score is found.
pub fn run_chain(density: &JointDensity, config: &McmcConfig) -> Result<ChainOutput> {
    config.validate()?;
    let y = density.observations();
    let n = y.len();
    let n_obs = y.n_observed();
    let prior = density.prior();

    let per_state_s = if config.sigma_s.is_empty() {
        y.values.iter().map(|v| (0.075 * sample_std(v)).max(1e-12)).collect()
    } else {
        broadcast(&config.sigma_s, n_obs, "state")?
    };
    let param_scales = if config.sigma_p.is_empty() {
        prior.widths().iter().map(|w| 0.05 * w).collect()
    } else {
        broadcast(&config.sigma_p, prior.dim(), "parameter")?
    };
    let state_scales: Vec<f64> = per_state_s.iter().flat_map(|s| std::iter::repeat_n(*s, n)).collect();

    let blocks = density.context().blocks();
    let mut init_states = Vec::with_capacity(n * n_obs);
    for (k, block) in blocks.iter().enumerate() {
        let model: &KernelModel = block.model();
        init_states.extend(model.posterior_mean(&y.values[k])?);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let target = MatchingTarget::new(density, config.strict_paper_caching);
    let mut init_theta = draw_from_box(&mut rng, &prior.lower, &prior.upper);
    let mut best = target.evaluate(&init_states, &init_theta).0;
    let mut draws = 1;
    while draws < config.init_draws.max(1) || (!best.is_finite() && draws < 1000) {
        let candidate = draw_from_box(&mut rng, &prior.lower, &prior.upper);
        let score = target.evaluate(&init_states, &candidate).0;
        if score > best || (best.is_nan() && !score.is_nan()) {
            best = score;
            init_theta = candidate;
        }
        draws += 1;
    }

    let settings = SamplerSettings {
        state_scales,
        param_scales,
        n_samples: config.n_samples,
        n_burnin: config.n_burnin,
        coherence_check_every: config.coherence_check_every,
    };
    sample_chain(&target, init_states, init_theta, &settings, &mut rng)
}

fn draw_from_box<R: Rng>(rng: &mut R, lower: &[f64], upper: &[f64]) -> Vec<f64> {
    lower.iter().zip(upper).map(|(l, u)| l + (u - l) * rng.random::<f64>()).collect()
}

/// Component-wise posterior means.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorEstimate {
    pub theta: Vec<f64>,
    /// Block-major like [`ChainState::x_m`].
    pub x_m: Vec<f64>,
}

pub fn posterior_estimate(samples: &[Sample]) -> Result<PosteriorEstimate> {
    let first = samples.first().ok_or(Error::EmptyChain)?;
    let n = samples.len() as f64;
    let mut theta = vec![0.0; first.theta.len()];
    let mut x_m = vec![0.0; first.x_m.len()];
    for s in samples {
        for (acc, v) in theta.iter_mut().zip(&s.theta) {
            *acc += v;
        }
        for (acc, v) in x_m.iter_mut().zip(&s.x_m) {
            *acc += v;
        }
    }
    theta.iter_mut().chain(x_m.iter_mut()).for_each(|v| *v /= n);
    Ok(PosteriorEstimate { theta, x_m })
}

/// Integrated autocorrelation time by Geyer's initial positive sequence.
pub fn autocorrelation_time(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return 1.0;
    }
    let m = x.iter().sum::<f64>() / n as f64;
    let var = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
    if var == 0.0 {
        return 1.0;
    }
    let rho =
        |lag: usize| -> f64 { (0..n - lag).map(|i| (x[i] - m) * (x[i + lag] - m)).sum::<f64>() / (n as f64 * var) };
    let mut tau = -1.0;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        tau += 2.0 * pair;
        lag += 2;
    }
    tau.max(1.0)
}
