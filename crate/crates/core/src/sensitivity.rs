//! Normalized local sensitivity indices
//! `S_ij = ‖∂x_i/∂θ_j‖ / ‖x_i‖` with L² norms over a time window.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ode_core::{integrate_with, OdeSystem, StepSchedule, Trajectory};

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityMatrix {
    /// `values[i][j]`: state `i`, parameter `j`.
    pub values: Vec<Vec<f64>>,
    pub theta_ref: Vec<f64>,
    pub window: (f64, f64),
    pub fd_step: f64,
}

impl SensitivityMatrix {
    pub fn get(&self, state: usize, param: usize) -> f64 {
        self.values[state][param]
    }

    /// Index of the most sensitive parameter for `state`.
    pub fn argmax(&self, state: usize) -> usize {
        let row = &self.values[state];
        (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0)
    }

    /// Index of the least sensitive parameter for `state`.
    pub fn argmin(&self, state: usize) -> usize {
        let row = &self.values[state];
        (0..row.len()).min_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap_or(0)
    }

    /// One row per parameter, one column per state.
    pub fn to_csv(&self) -> String {
        let n_states = self.values.len();
        let n_params = self.values.first().map_or(0, |r| r.len());
        let mut out = String::from("parameter");
        for i in 0..n_states {
            out.push_str(&format!(",x{}", i + 1));
        }
        out.push('\n');
        for j in 0..n_params {
            out.push_str(&format!("theta{}", j + 1));
            for i in 0..n_states {
                out.push_str(&format!(",{:.6}", self.values[i][j]));
            }
            out.push('\n');
        }
        out
    }
}

/// Trapezoid-rule L² norm of `f` sampled on `times`, restricted to `window`.
fn l2_norm(times: &[f64], f: impl Fn(usize) -> f64, window: (f64, f64)) -> f64 {
    let mut acc = 0.0;
    for k in 0..times.len().saturating_sub(1) {
        let (a, b) = (times[k], times[k + 1]);
        if a < window.0 - 1e-12 || b > window.1 + 1e-12 {
            continue;
        }
        let (fa, fb) = (f(k), f(k + 1));
        acc += 0.5 * (b - a) * (fa * fa + fb * fb);
    }
    acc.sqrt()
}

/// Sensitivity of every state to every parameter at `theta_ref`.
///
/// The system is integrated from `full_init` at `window.0` to `window.1`;
/// derivatives are central differences with step `fd_step · |θ_j|`
/// (`fd_step` when `θ_j = 0`).
pub fn sensitivity_indices(
    system: &OdeSystem,
    theta_ref: &[f64],
    full_init: &[f64],
    window: (f64, f64),
    schedule: &StepSchedule,
    fd_step: f64,
) -> Result<SensitivityMatrix> {
    if !(fd_step.is_finite() && fd_step > 0.0) {
        return Err(Error::InvalidInput(format!("fd_step must be positive, got {fd_step}")));
    }
    let base = integrate_with(system, theta_ref, full_init, window, schedule)?;
    let times = base.times().to_vec();
    let p = system.param_dim();
    let n_states = system.state_dim();

    let run = |j: usize, h: f64| -> Result<Trajectory> {
        let mut th = theta_ref.to_vec();
        th[j] += h;
        integrate_with(system, &th, full_init, window, schedule).map_err(|e| match e {
            Error::BlowUp { component, .. } => Error::Sensitivity { state: component, param: j, source: Box::new(e) },
            other => other,
        })
    };

    let columns: Vec<Vec<f64>> = (0..p)
        .into_par_iter()
        .map(|j| -> Result<Vec<f64>> {
            let h = fd_step * if theta_ref[j] == 0.0 { 1.0 } else { theta_ref[j].abs() };
            let plus = run(j, h)?;
            let minus = run(j, -h)?;
            Ok((0..n_states)
                .map(|i| {
                    let num = l2_norm(&times, |k| (plus.state(k)[i] - minus.state(k)[i]) / (2.0 * h), window);
                    let den = l2_norm(&times, |k| base.state(k)[i], window);
                    if den > 0.0 {
                        num / den
                    } else {
                        0.0
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let values = (0..n_states).map(|i| (0..p).map(|j| columns[j][i]).collect()).collect();
    Ok(SensitivityMatrix { values, theta_ref: theta_ref.to_vec(), window, fd_step })
}
