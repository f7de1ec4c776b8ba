//! Python bindings: kernels, GP fitting, integration, sensitivity and the
//! experiment pipeline.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use gpgm::harness::{self, ExperimentConfig, RunReport};
use gpgm::ode_core::builtin;
use gpgm::{Error, KernelFamily, KernelModel, KernelSpec, StepSchedule};

fn to_py(e: Error) -> PyErr {
    match e {
        Error::Config(_) | Error::InvalidInput(_) | Error::InvalidKernel(_) | Error::Dimension(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn family(name: &str) -> PyResult<KernelFamily> {
    name.parse::<KernelFamily>().map_err(to_py)
}

/// Covariance kernel with its time derivatives.
#[pyclass(name = "Kernel", frozen)]
struct PyKernel {
    spec: KernelSpec,
}

#[pymethods]
impl PyKernel {
    /// `family_name` is one of "se", "matern52", "sigmoid"; `hyper` holds the two
    /// hyperparameters in the family's order.
    #[new]
    fn new(family_name: &str, hyper: Vec<f64>) -> PyResult<Self> {
        Ok(Self { spec: KernelSpec::new(family(family_name)?, hyper).map_err(to_py)? })
    }

    #[getter]
    fn family(&self) -> &'static str {
        self.spec.family().name()
    }

    #[getter]
    fn hyperparameters(&self) -> Vec<f64> {
        self.spec.hyperparameters().to_vec()
    }

    fn eval(&self, a: f64, b: f64) -> f64 {
        self.spec.eval(a, b)
    }

    fn eval_da(&self, a: f64, b: f64) -> f64 {
        self.spec.eval_da(a, b)
    }

    fn eval_db(&self, a: f64, b: f64) -> f64 {
        self.spec.eval_db(a, b)
    }

    fn eval_dadb(&self, a: f64, b: f64) -> f64 {
        self.spec.eval_dadb(a, b)
    }

    fn gram(&self, times: Vec<f64>) -> Vec<Vec<f64>> {
        let g = self.spec.gram(&times);
        (0..g.nrows()).map(|i| g.row(i).iter().copied().collect()).collect()
    }

    fn __repr__(&self) -> String {
        format!("Kernel({:?}, {:?})", self.spec.family().name(), self.spec.hyperparameters())
    }
}

/// Fitted GP: kernel, noise std and constant mean.
#[pyclass(name = "GpModel", frozen)]
struct PyGpModel {
    model: KernelModel,
}

#[pymethods]
impl PyGpModel {
    #[getter]
    fn kernel(&self) -> PyKernel {
        PyKernel { spec: self.model.spec().clone() }
    }

    #[getter]
    fn sigma(&self) -> f64 {
        self.model.sigma()
    }

    #[getter]
    fn mean(&self) -> f64 {
        self.model.mean()
    }

    #[getter]
    fn times(&self) -> Vec<f64> {
        self.model.times().to_vec()
    }

    fn posterior_mean(&self, y: Vec<f64>) -> PyResult<Vec<f64>> {
        self.model.posterior_mean(&y).map_err(to_py)
    }

    fn log_marginal_likelihood(&self, y: Vec<f64>) -> PyResult<f64> {
        let centered: Vec<f64> = y.iter().map(|v| v - self.model.mean()).collect();
        self.model.log_marginal_likelihood(&centered).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        self.model.describe()
    }
}

/// Maximum-marginal-likelihood GP fit of one state's observations.
#[pyfunction]
#[pyo3(signature = (times, y, family_name = "se"))]
fn fit_gp(py: Python<'_>, times: Vec<f64>, y: Vec<f64>, family_name: &str) -> PyResult<PyGpModel> {
    let fam = family(family_name)?;
    let model = py.detach(|| gpgm::fit_hyperparameters(&times, &y, fam)).map_err(to_py)?;
    Ok(PyGpModel { model })
}

/// RK4 solution of a built-in system; returns `(times, states)` on the grid.
#[pyfunction]
#[pyo3(signature = (system, theta, init, t0, t1, h, fhn_standard_sign = true))]
#[allow(clippy::too_many_arguments)]
fn integrate(
    system: &str,
    theta: Vec<f64>,
    init: Vec<f64>,
    t0: f64,
    t1: f64,
    h: f64,
    fhn_standard_sign: bool,
) -> PyResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let sys = builtin(system, fhn_standard_sign).map_err(to_py)?;
    let traj = gpgm::integrate(&sys, &theta, &init, (t0, t1), h).map_err(to_py)?;
    Ok((traj.times().to_vec(), (0..traj.len()).map(|k| traj.state(k).to_vec()).collect()))
}

/// Sensitivity matrix `S[state][param]` of a built-in system over `[t0, t1]`.
#[pyfunction]
#[pyo3(signature = (system, theta, init, t0, t1, h, fd_step = 1e-4, fhn_standard_sign = true))]
#[allow(clippy::too_many_arguments)]
fn sensitivity(
    py: Python<'_>,
    system: &str,
    theta: Vec<f64>,
    init: Vec<f64>,
    t0: f64,
    t1: f64,
    h: f64,
    fd_step: f64,
    fhn_standard_sign: bool,
) -> PyResult<Vec<Vec<f64>>> {
    let sys = builtin(system, fhn_standard_sign).map_err(to_py)?;
    let m = py
        .detach(|| gpgm::sensitivity_indices(&sys, &theta, &init, (t0, t1), &StepSchedule::uniform(h), fd_step))
        .map_err(to_py)?;
    Ok(m.values)
}

#[pyfunction]
fn presets() -> Vec<&'static str> {
    harness::PRESETS.to_vec()
}

/// Summary of a full pipeline run.
#[pyclass(name = "Report", frozen)]
struct PyReport {
    report: RunReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn theta_true(&self) -> Vec<f64> {
        self.report.theta_true.clone()
    }

    #[getter]
    fn theta_fgpgm(&self) -> Vec<f64> {
        self.report.theta_fgpgm.clone()
    }

    #[getter]
    fn theta_refined(&self) -> Vec<f64> {
        self.report.theta_refined.clone()
    }

    #[getter]
    fn rel_err_fgpgm(&self) -> Vec<f64> {
        self.report.rel_err_fgpgm.clone()
    }

    #[getter]
    fn rel_err_refined(&self) -> Vec<f64> {
        self.report.rel_err_refined.clone()
    }

    #[getter]
    fn rmse_fgpgm(&self) -> f64 {
        self.report.rmse_fgpgm
    }

    #[getter]
    fn rmse_refined(&self) -> f64 {
        self.report.rmse_refined
    }

    #[getter]
    fn state_acceptance(&self) -> f64 {
        self.report.state_acceptance
    }

    #[getter]
    fn param_acceptance(&self) -> f64 {
        self.report.param_acceptance
    }

    #[getter]
    fn gps(&self) -> Vec<PyGpModel> {
        self.report.gps.iter().map(|m| PyGpModel { model: m.clone() }).collect()
    }

    fn to_text(&self) -> String {
        self.report.to_text()
    }

    fn __repr__(&self) -> String {
        format!("Report(preset={:?}, seed={})", self.report.preset, self.report.seed)
    }
}

type Observations = (Vec<f64>, Vec<usize>, Vec<Vec<f64>>);

/// An experiment configuration, from a preset name or INI text.
#[pyclass(name = "Experiment")]
struct PyExperiment {
    config: ExperimentConfig,
}

#[pymethods]
impl PyExperiment {
    #[new]
    #[pyo3(signature = (preset = None, ini = None, seed = None))]
    fn new(preset: Option<&str>, ini: Option<&str>, seed: Option<u64>) -> PyResult<Self> {
        let mut config = match (preset, ini) {
            (Some(p), None) => ExperimentConfig::preset(p),
            (None, Some(text)) => ExperimentConfig::from_ini(text),
            _ => Err(Error::Config("give exactly one of preset or ini".into())),
        }
        .map_err(to_py)?;
        if let Some(s) = seed {
            config = config.with_seed(s);
        }
        Ok(Self { config })
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.config.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.config = self.config.clone().with_seed(seed);
    }

    #[getter]
    fn mcmc_samples(&self) -> usize {
        self.config.mcmc.n_samples
    }

    #[setter]
    fn set_mcmc_samples(&mut self, n: usize) {
        self.config.mcmc.n_samples = n;
    }

    #[getter]
    fn burnin(&self) -> usize {
        self.config.mcmc.n_burnin
    }

    #[setter]
    fn set_burnin(&mut self, n: usize) {
        self.config.mcmc.n_burnin = n;
    }

    #[getter]
    fn theta(&self) -> Vec<f64> {
        self.config.theta.clone()
    }

    fn to_ini(&self) -> String {
        self.config.to_ini()
    }

    /// Noisy observations: `(times, observed_indices, values)` with
    /// `values[k][i]` for observed state `k` at `times[i]`.
    fn simulate(&self) -> PyResult<Observations> {
        let y = harness::generate_data(&self.config).map_err(to_py)?;
        Ok((y.times, y.observed_idx, y.values))
    }

    /// Full pipeline; writes the usual artifacts to `out` when given.
    #[pyo3(signature = (out = None))]
    fn infer(&self, py: Python<'_>, out: Option<PathBuf>) -> PyResult<PyReport> {
        let report = py.detach(|| harness::run_experiment(&self.config, out.as_deref())).map_err(to_py)?;
        Ok(PyReport { report })
    }

    /// Least squares alone from `theta0` (default: the true parameters).
    /// Returns `(theta, objective, objective_at_truth)`.
    #[pyo3(signature = (theta0 = None))]
    fn refine_only(&self, py: Python<'_>, theta0: Option<Vec<f64>>) -> PyResult<(Vec<f64>, f64, f64)> {
        let mut cfg = self.config.clone();
        if theta0.is_some() {
            cfg.refine_start = theta0;
        }
        let r = py.detach(|| harness::run_refine_only(&cfg, None)).map_err(to_py)?;
        Ok((r.refinement.theta, r.refinement.objective, r.objective_true))
    }

    fn sensitivity(&self, py: Python<'_>) -> PyResult<Vec<Vec<f64>>> {
        py.detach(|| harness::run_sensitivity(&self.config)).map(|m| m.values).map_err(to_py)
    }

    fn __repr__(&self) -> String {
        format!("Experiment({:?}, seed={})", self.config.name, self.config.seed)
    }
}

#[pymodule]
fn gpgm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyKernel>()?;
    m.add_class::<PyGpModel>()?;
    m.add_class::<PyReport>()?;
    m.add_class::<PyExperiment>()?;
    m.add_function(wrap_pyfunction!(fit_gp, m)?)?;
    m.add_function(wrap_pyfunction!(integrate, m)?)?;
    m.add_function(wrap_pyfunction!(sensitivity, m)?)?;
    m.add_function(wrap_pyfunction!(presets, m)?)?;
    Ok(())
}
