//! GP prior fitting by marginal-likelihood maximization.
//!
//! Observations are centred on their sample mean before any GP computation so
//! that the zero-mean prior `N(x | 0, C_φ)` applies; the mean is stored on the
//! fitted model and added back when reporting.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::kernels::{KernelFamily, KernelSpec};
use crate::linalg::Factor;
use crate::optim::nelder_mead;

/// A GP prior with frozen hyperparameters and observation noise.
#[derive(Debug, Clone)]
pub struct KernelModel {
    spec: KernelSpec,
    sigma: f64,
    times: Vec<f64>,
    mean: f64,
    gram: DMatrix<f64>,
}

impl KernelModel {
    pub fn new(spec: KernelSpec, sigma: f64, times: Vec<f64>, mean: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidInput(format!("noise std must be >= 0, got {sigma}")));
        }
        if times.is_empty() {
            return Err(Error::InvalidInput("empty time grid".into()));
        }
        let gram = spec.gram(&times);
        Ok(Self { spec, sigma, times, mean, gram })
    }

    pub fn spec(&self) -> &KernelSpec {
        &self.spec
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// `C_φ + σ²I`.
    pub fn noisy_gram(&self) -> DMatrix<f64> {
        let n = self.times.len();
        &self.gram + DMatrix::identity(n, n) * (self.sigma * self.sigma)
    }

    /// `log N(y | 0, C_φ + σ²I)` for already-centred observations.
    pub fn log_marginal_likelihood(&self, y_centered: &[f64]) -> Result<f64> {
        if y_centered.len() != self.times.len() {
            return Err(Error::Dimension(format!("{} observations for {} times", y_centered.len(), self.times.len())));
        }
        let factor = Factor::new(&self.noisy_gram())?;
        Ok(factor.log_normal(&DVector::from_column_slice(y_centered)))
    }

    /// GP posterior mean of the latent function at the training times, in data units.
    pub fn posterior_mean(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.times.len() {
            return Err(Error::Dimension(format!("{} observations for {} times", y.len(), self.times.len())));
        }
        let factor = Factor::new(&self.noisy_gram())?;
        let centered = DVector::from_iterator(y.len(), y.iter().map(|v| v - self.mean));
        let alpha = factor.solve(&centered);
        let m = &self.gram * alpha;
        Ok(m.iter().map(|v| v + self.mean).collect())
    }

    /// Key-value text block describing the fitted model.
    pub fn describe(&self) -> String {
        let names = self.spec.family().hyperparameter_names();
        let mut out = format!("family = {}\n", self.spec.family());
        for (name, value) in names.iter().zip(self.spec.hyperparameters()) {
            out.push_str(&format!("{name} = {value:.12e}\n"));
        }
        out.push_str(&format!("sigma = {:.12e}\nmean = {:.12e}\n", self.sigma, self.mean));
        out
    }
}

#[derive(Debug, Clone)]
pub struct FitOptions {
    /// Number of Nelder–Mead restarts; the first starts from a data-driven guess.
    pub restarts: usize,
    pub seed: u64,
    pub max_evals: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self { restarts: 8, seed: 0, max_evals: 600 }
    }
}

/// Fits kernel hyperparameters and noise with default options.
pub fn fit_hyperparameters(times: &[f64], y: &[f64], family: KernelFamily) -> Result<KernelModel> {
    fit_hyperparameters_with(times, y, family, &FitOptions::default())
}

/// Log-space search box for `[hyper_0, hyper_1, σ]`.
#[derive(Debug, Clone)]
struct SearchBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
    guess: Vec<f64>,
}

impl SearchBox {
    fn new(times: &[f64], scale: f64, family: KernelFamily) -> Self {
        let span = times[times.len() - 1] - times[0];
        let min_dt = times.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        let s2 = scale * scale;
        let (h0, h1) = match family {
            KernelFamily::SquaredExponential | KernelFamily::Matern52 => {
                ((1e-6 * s2, 1e2 * s2, s2), (0.5 * min_dt, 10.0 * span, 0.25 * span))
            }
            KernelFamily::Sigmoid => {
                let tmax = times.iter().fold(0.0f64, |m, t| m.max(t.abs()));
                ((1e-3 * scale, 1e2 * scale, scale), (1e-3, 1e2 * (tmax * tmax + 1.0), 1.0 + tmax))
            }
        };
        let sigma = (1e-6 * scale, 2.0 * scale, 0.1 * scale);
        let lower = vec![h0.0.ln(), h1.0.ln(), sigma.0.ln()];
        let upper = vec![h0.1.ln(), h1.1.ln(), sigma.1.ln()];
        let guess = vec![h0.2.ln(), h1.2.ln(), sigma.2.ln()];
        Self { lower, upper, guess }
    }

    fn contains(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.lower).zip(&self.upper).all(|((v, lo), hi)| v >= lo && v <= hi)
    }
}

/// Negative log marginal likelihood in log-coordinates `[ln h0, ln h1, ln σ]`.
fn neg_lml(times: &[f64], y: &DVector<f64>, family: KernelFamily, x: &[f64]) -> f64 {
    let Ok(spec) = KernelSpec::from_log(family, &x[..2]) else {
        return f64::INFINITY;
    };
    let sigma = x[2].exp();
    let mut k = spec.gram(times);
    for i in 0..times.len() {
        k[(i, i)] += sigma * sigma;
    }
    match Factor::new(&k) {
        Ok(f) => -f.log_normal(y),
        Err(_) => f64::INFINITY,
    }
}

/// Multistart Nelder–Mead maximization of the log marginal likelihood in log-space.
pub fn fit_hyperparameters_with(
    times: &[f64],
    y: &[f64],
    family: KernelFamily,
    opts: &FitOptions,
) -> Result<KernelModel> {
    if times.len() != y.len() {
        return Err(Error::Dimension(format!("{} times, {} observations", times.len(), y.len())));
    }
    if times.len() < 4 {
        return Err(Error::InvalidInput(format!("need at least 4 observations, got {}", times.len())));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::InvalidInput("observation times must be strictly increasing".into()));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite observation".into()));
    }

    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let centered = DVector::from_iterator(y.len(), y.iter().map(|v| v - mean));
    let std = (centered.norm_squared() / (n - 1.0)).sqrt();
    let scale = if std > 1e-12 * mean.abs().max(1.0) { std } else { 1e-3 * mean.abs().max(1.0) };
    let bounds = SearchBox::new(times, scale, family);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut starts = vec![bounds.guess.clone()];
    while starts.len() < opts.restarts.max(1) {
        let x: Vec<f64> = bounds.lower.iter().zip(&bounds.upper).map(|(lo, hi)| rng.random_range(*lo..*hi)).collect();
        starts.push(x);
    }

    let objective = |x: &[f64]| {
        if bounds.contains(x) {
            neg_lml(times, &centered, family, x)
        } else {
            f64::INFINITY
        }
    };
    let results: Vec<_> = starts.par_iter().map(|x0| nelder_mead(objective, x0, 0.5, opts.max_evals, 1e-10)).collect();
    let best = results
        .iter()
        .filter(|m| m.value.is_finite())
        .min_by(|a, b| a.value.total_cmp(&b.value))
        .ok_or_else(|| Error::Optimization(format!("all {} restarts diverged", starts.len())))?;

    let spec = KernelSpec::from_log(family, &best.x[..2])?;
    KernelModel::new(spec, best.x[2].exp(), times.to_vec(), mean)
}
