//! Covariance functions with analytic cross-derivatives.
//!
//! Every family exposes `k(a, b)`, `∂k/∂a`, `∂k/∂b` and `∂²k/∂a∂b`, which are
//! the covariances between a process and its time derivative:
//!
//! * `cov(x(a), ẋ(b)) = ∂k/∂b`
//! * `cov(ẋ(a), x(b)) = ∂k/∂a`
//! * `cov(ẋ(a), ẋ(b)) = ∂²k/∂a∂b`

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    /// `v · exp(−(a−b)² / (2l²))`, hyperparameters `[v, l]`.
    SquaredExponential,
    /// `v · (1 + s + s²/3) · exp(−s)` with `s = √5|a−b|/l`, hyperparameters `[v, l]`.
    Matern52,
    /// `σ_f² · asin((c + ab) / √((c + a² + 1)(c + b² + 1)))`, hyperparameters `[σ_f, c]`.
    Sigmoid,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 3] =
        [KernelFamily::SquaredExponential, KernelFamily::Matern52, KernelFamily::Sigmoid];

    pub fn name(self) -> &'static str {
        match self {
            KernelFamily::SquaredExponential => "squared_exponential",
            KernelFamily::Matern52 => "matern52",
            KernelFamily::Sigmoid => "sigmoid",
        }
    }

    /// Names of the hyperparameters, in storage order.
    pub fn hyperparameter_names(self) -> [&'static str; 2] {
        match self {
            KernelFamily::SquaredExponential | KernelFamily::Matern52 => ["variance", "length_scale"],
            KernelFamily::Sigmoid => ["sigma_f", "offset"],
        }
    }

    pub fn n_hyperparameters(self) -> usize {
        2
    }
}

impl fmt::Display for KernelFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for KernelFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "squared_exponential" | "se" | "rbf" => Ok(KernelFamily::SquaredExponential),
            "matern52" | "matern_52" | "matern" => Ok(KernelFamily::Matern52),
            "sigmoid" | "neural_network" | "arcsin" => Ok(KernelFamily::Sigmoid),
            other => Err(Error::Config(format!("unknown kernel family '{other}'"))),
        }
    }
}

/// A kernel family together with its (strictly positive) hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    family: KernelFamily,
    hyper: Vec<f64>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, hyper: Vec<f64>) -> Result<Self> {
        if hyper.len() != family.n_hyperparameters() {
            return Err(Error::InvalidKernel(format!(
                "{family} expects {} hyperparameters, got {}",
                family.n_hyperparameters(),
                hyper.len()
            )));
        }
        if let Some(bad) = hyper.iter().find(|h| !(h.is_finite() && **h > 0.0)) {
            return Err(Error::InvalidKernel(format!(
                "{family} hyperparameters must be finite and positive, got {bad}"
            )));
        }
        Ok(Self { family, hyper })
    }

    pub fn squared_exponential(variance: f64, length_scale: f64) -> Result<Self> {
        Self::new(KernelFamily::SquaredExponential, vec![variance, length_scale])
    }

    pub fn matern52(variance: f64, length_scale: f64) -> Result<Self> {
        Self::new(KernelFamily::Matern52, vec![variance, length_scale])
    }

    pub fn sigmoid(sigma_f: f64, offset: f64) -> Result<Self> {
        Self::new(KernelFamily::Sigmoid, vec![sigma_f, offset])
    }

    /// Builds a spec from log-hyperparameters, the coordinates used by the optimizer.
    pub fn from_log(family: KernelFamily, log_hyper: &[f64]) -> Result<Self> {
        Self::new(family, log_hyper.iter().map(|v| v.exp()).collect())
    }

    pub fn family(&self) -> KernelFamily {
        self.family
    }

    pub fn hyperparameters(&self) -> &[f64] {
        &self.hyper
    }

    pub fn log_hyperparameters(&self) -> Vec<f64> {
        self.hyper.iter().map(|h| h.ln()).collect()
    }

    pub fn eval(&self, a: f64, b: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => {
                let (v, l) = (self.hyper[0], self.hyper[1]);
                let d = a - b;
                v * (-0.5 * d * d / (l * l)).exp()
            }
            KernelFamily::Matern52 => {
                let (v, l) = (self.hyper[0], self.hyper[1]);
                let s = 5f64.sqrt() * (a - b).abs() / l;
                v * (1.0 + s + s * s / 3.0) * (-s).exp()
            }
            KernelFamily::Sigmoid => {
                let s2 = self.hyper[0] * self.hyper[0];
                s2 * Arcsin::new(self.hyper[1], a, b).z.asin()
            }
        }
    }

    /// `∂k(a, b)/∂b`.
    pub fn eval_db(&self, a: f64, b: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => {
                let l2 = self.hyper[1] * self.hyper[1];
                self.eval(a, b) * (a - b) / l2
            }
            KernelFamily::Matern52 => {
                let (v, l) = (self.hyper[0], self.hyper[1]);
                let d = a - b;
                let s = 5f64.sqrt() * d.abs() / l;
                v * 5.0 * d / (3.0 * l * l) * (1.0 + s) * (-s).exp()
            }
            KernelFamily::Sigmoid => {
                let s2 = self.hyper[0] * self.hyper[0];
                let arc = Arcsin::new(self.hyper[1], a, b);
                s2 * arc.dz_db() / (1.0 - arc.z * arc.z).sqrt()
            }
        }
    }

    /// `∂k(a, b)/∂a`.
    pub fn eval_da(&self, a: f64, b: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential | KernelFamily::Matern52 => -self.eval_db(a, b),
            KernelFamily::Sigmoid => {
                let s2 = self.hyper[0] * self.hyper[0];
                let arc = Arcsin::new(self.hyper[1], a, b);
                s2 * arc.dz_da() / (1.0 - arc.z * arc.z).sqrt()
            }
        }
    }

    /// `∂²k(a, b)/∂a∂b`.
    pub fn eval_dadb(&self, a: f64, b: f64) -> f64 {
        match self.family {
            KernelFamily::SquaredExponential => {
                let l2 = self.hyper[1] * self.hyper[1];
                let d = a - b;
                self.eval(a, b) / l2 * (1.0 - d * d / l2)
            }
            KernelFamily::Matern52 => {
                let (v, l) = (self.hyper[0], self.hyper[1]);
                let s = 5f64.sqrt() * (a - b).abs() / l;
                v * 5.0 / (3.0 * l * l) * (1.0 + s - s * s) * (-s).exp()
            }
            KernelFamily::Sigmoid => {
                let s2 = self.hyper[0] * self.hyper[0];
                let arc = Arcsin::new(self.hyper[1], a, b);
                let w = 1.0 - arc.z * arc.z;
                s2 * (arc.d2z_dadb() / w.sqrt() + arc.z * arc.dz_da() * arc.dz_db() / (w * w.sqrt()))
            }
        }
    }

    /// Gram matrix `K[i][j] = k(times[i], times[j])`, symmetrised.
    pub fn gram(&self, times: &[f64]) -> nalgebra::DMatrix<f64> {
        let n = times.len();
        let mut k = nalgebra::DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let v = self.eval(times[i], times[j]);
                k[(i, j)] = v;
                k[(j, i)] = v;
            }
        }
        k
    }
}

/// Pieces of the arcsine kernel argument `z = u / √(p q)`.
struct Arcsin {
    a: f64,
    b: f64,
    u: f64,
    p: f64,
    q: f64,
    z: f64,
}

impl Arcsin {
    fn new(c: f64, a: f64, b: f64) -> Self {
        let u = c + a * b;
        let p = c + a * a + 1.0;
        let q = c + b * b + 1.0;
        // |z| < 1 strictly since u² ≤ (c + a²)(c + b²) < p q
        let z = u / (p * q).sqrt();
        Self { a, b, u, p, q, z }
    }

    fn dz_da(&self) -> f64 {
        (self.b - self.u * self.a / self.p) / (self.p * self.q).sqrt()
    }

    fn dz_db(&self) -> f64 {
        (self.a - self.u * self.b / self.q) / (self.p * self.q).sqrt()
    }

    fn d2z_dadb(&self) -> f64 {
        let root = (self.p * self.q).sqrt();
        (1.0 - self.b * self.b / self.q) / root - (self.a - self.u * self.b / self.q) * self.a / (self.p * root)
    }
}
