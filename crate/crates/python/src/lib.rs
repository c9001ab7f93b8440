//! Python module `transport_energy`: grids, sources, the regularized energy,
//! gradient flows, JKO chains, the 1D oracle and the experiment runner.
//!
//! Fields cross the boundary as flat lists of nodal values in grid order.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use ::transport_energy::cli::{run_experiment, ExperimentConfig};
use ::transport_energy::diagnostics::{self, BruteForceOptions, ResidualReport};
use ::transport_energy::elliptic::{RegParams, SolverOptions};
use ::transport_energy::energy::{self as te_energy, Density, EnergyBreakdown};
use ::transport_energy::error::{Error, Result as TeResult};
use ::transport_energy::flow::{self, DtControl, FlowConfig};
use ::transport_energy::grid::{self as tgrid, AxisBox, ScalarField, SourceOptions, SourcePiece, SourceSpec};
use ::transport_energy::metric::{self, DwBasis, JkoConfig};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::SolverDiverged { .. } | Error::StepUnderflow(_) | Error::NonReproducible { .. } => {
            PyRuntimeError::new_err(e.to_string())
        }
        _ => PyValueError::new_err(e.to_string()),
    }
}

trait OrPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> OrPy<T> for TeResult<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(py_err)
    }
}

/// Node-centred tensor grid on `[lo, hi]` with `n` nodes per axis.
#[pyclass(name = "Grid", module = "transport_energy", frozen, from_py_object)]
#[derive(Clone)]
struct PyGrid {
    inner: Arc<tgrid::Grid>,
}

#[pymethods]
impl PyGrid {
    #[new]
    fn new(lo: Vec<f64>, hi: Vec<f64>, n: Vec<usize>) -> PyResult<Self> {
        let inner = tgrid::build_grid(n.len(), &lo, &hi, &n).py()?;
        Ok(Self { inner })
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    #[getter]
    fn h(&self) -> Vec<f64> {
        self.inner.h().to_vec()
    }

    /// Node coordinates, one `[x]` or `[x, y]` per node.
    fn coords(&self) -> Vec<Vec<f64>> {
        let d = self.inner.dim();
        self.inner.coords().map(|c| c[..d].to_vec()).collect()
    }

    /// Trapezoid quadrature weights.
    fn weights(&self) -> Vec<f64> {
        self.inner.weights().to_vec()
    }

    fn boundary_mask(&self) -> Vec<bool> {
        self.inner.boundary_mask().to_vec()
    }

    fn integrate(&self, values: Vec<f64>) -> PyResult<f64> {
        Ok(tgrid::integrate(&self.field(values)?))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Grid({})", self.inner)
    }
}

impl PyGrid {
    fn field(&self, values: Vec<f64>) -> PyResult<ScalarField> {
        ScalarField::new(self.inner.clone(), values).py()
    }

    fn density(&self, values: Vec<f64>) -> PyResult<Density> {
        Density::from_values(self.inner.clone(), values).py()
    }
}

/// Piecewise-constant signed source; `boxes` holds `(lo, hi, value)` triples.
#[pyclass(name = "Source", module = "transport_energy", frozen)]
struct PySource {
    inner: tgrid::SourceData,
    grid: PyGrid,
}

#[pymethods]
impl PySource {
    #[new]
    #[pyo3(signature = (grid, boxes, allow_mean_correction = false, margin = None))]
    fn new(
        grid: PyGrid,
        boxes: Vec<(Vec<f64>, Vec<f64>, f64)>,
        allow_mean_correction: bool,
        margin: Option<f64>,
    ) -> PyResult<Self> {
        let pieces = boxes
            .into_iter()
            .map(|(lo, hi, value)| Ok(SourcePiece { region: AxisBox::new(lo, hi)?, value }))
            .collect::<TeResult<Vec<_>>>()
            .py()?;
        let options = SourceOptions { allow_mean_correction, margin };
        let inner = tgrid::make_source(&grid.inner, SourceSpec::PiecewiseConstant(pieces), options).py()?;
        Ok(Self { inner, grid })
    }

    #[getter]
    fn grid(&self) -> PyGrid {
        self.grid.clone()
    }

    fn values(&self) -> Vec<f64> {
        self.inner.field().values().to_vec()
    }

    #[getter]
    fn mean_correction(&self) -> f64 {
        self.inner.mean_correction()
    }
}

/// Regularization `(λ, δ, p)`.
#[pyclass(name = "Params", module = "transport_energy", frozen, from_py_object)]
#[derive(Clone, Copy)]
struct PyParams {
    inner: RegParams,
}

#[pymethods]
impl PyParams {
    #[new]
    #[pyo3(signature = (lam, delta = 0.0, p = 2.0))]
    fn new(lam: f64, delta: f64, p: f64) -> PyResult<Self> {
        Ok(Self { inner: RegParams::new(lam, delta, p).py()? })
    }

    #[getter]
    fn lam(&self) -> f64 {
        self.inner.lambda
    }

    #[getter]
    fn delta(&self) -> f64 {
        self.inner.delta
    }

    #[getter]
    fn p(&self) -> f64 {
        self.inner.p
    }

    fn __repr__(&self) -> String {
        format!("Params(lam={}, delta={}, p={})", self.inner.lambda, self.inner.delta, self.inner.p)
    }
}

/// Truncated cosine basis defining the distance `d_w`.
#[pyclass(name = "DwBasis", module = "transport_energy", frozen)]
struct PyDwBasis {
    inner: DwBasis,
    grid: PyGrid,
}

#[pymethods]
impl PyDwBasis {
    #[new]
    #[pyo3(signature = (grid, k = None))]
    fn new(grid: PyGrid, k: Option<usize>) -> PyResult<Self> {
        let k = k.unwrap_or(if grid.inner.dim() == 1 { metric::DEFAULT_K_1D } else { metric::DEFAULT_K_2D });
        let inner = metric::build_dw_basis(&grid.inner, k).py()?;
        Ok(Self { inner, grid })
    }

    fn dw(&self, mu: Vec<f64>, nu: Vec<f64>) -> PyResult<f64> {
        metric::dw(&self.grid.field(mu)?, &self.grid.field(nu)?, &self.inner).py()
    }

    /// Bound on the truncated part of `d_w²`.
    fn tail_bound(&self, mu: Vec<f64>, nu: Vec<f64>) -> PyResult<f64> {
        Ok(metric::dw_tail_bound(&self.grid.field(mu)?, &self.grid.field(nu)?, &self.inner))
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn energy_dict<'py>(py: Python<'py>, e: &EnergyBreakdown) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("L", e.l)?;
    d.set_item("M", e.mass)?;
    d.set_item("sobolev", e.sobolev)?;
    d.set_item("total", e.total)?;
    Ok(d)
}

fn residual_dict<'py>(py: Python<'py>, r: &ResidualReport) -> PyResult<Bound<'py, PyDict>> {
    let d = PyDict::new(py);
    d.set_item("pde_residual", r.pde_residual)?;
    d.set_item("eikonal_excess", r.eikonal_excess)?;
    d.set_item("stationarity", r.stationarity)?;
    d.set_item("complementarity", r.complementarity)?;
    Ok(d)
}

/// `{"L", "M", "sobolev", "total"}` at the density `mu`.
#[pyfunction]
#[pyo3(signature = (source, params, mu, solver_tol = 1e-10))]
fn energy<'py>(
    py: Python<'py>,
    source: &PySource,
    params: &PyParams,
    mu: Vec<f64>,
    solver_tol: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let mu = source.grid.density(mu)?;
    let e = te_energy::eval_energy_with(&mu, &params.inner, &source.inner, &SolverOptions::with_tol(solver_tol)).py()?;
    energy_dict(py, &e)
}

/// Nodal L² gradient of the energy.
#[pyfunction]
fn gradient(source: &PySource, params: &PyParams, mu: Vec<f64>) -> PyResult<Vec<f64>> {
    let mu = source.grid.density(mu)?;
    Ok(te_energy::grad_energy(&mu, &params.inner, &source.inner).py()?.into_values())
}

/// Least-norm element of the subdifferential on the nonnegative cone.
#[pyfunction]
fn minimal_subgradient(source: &PySource, params: &PyParams, mu: Vec<f64>) -> PyResult<Vec<f64>> {
    let mu = source.grid.density(mu)?;
    Ok(te_energy::minimal_subgradient(&mu, &params.inner, &source.inner).py()?.into_values())
}

/// Potential `u` solving `-div((μ+λ)∇u) = f` with zero mean.
#[pyfunction]
#[pyo3(signature = (source, params, mu, solver_tol = 1e-10))]
fn potential(source: &PySource, params: &PyParams, mu: Vec<f64>, solver_tol: f64) -> PyResult<Vec<f64>> {
    let mu = source.grid.density(mu)?;
    let s = te_energy::evaluate(&mu, &params.inner, &source.inner, &SolverOptions::with_tol(solver_tol), None).py()?;
    Ok(s.u.into_field().into_values())
}

/// Optimality residuals of the regularized problem at `mu`.
#[pyfunction]
fn residuals<'py>(py: Python<'py>, source: &PySource, params: &PyParams, mu: Vec<f64>) -> PyResult<Bound<'py, PyDict>> {
    let mu = source.grid.density(mu)?;
    let s = te_energy::evaluate(&mu, &params.inner, &source.inner, &SolverOptions::default(), None).py()?;
    let r = diagnostics::regularized_residuals(&mu, s.u.field(), &params.inner, &source.inner).py()?;
    residual_dict(py, &r)
}

/// Closed-form 1D minimizer of the unregularized energy.
#[pyfunction]
fn oracle_1d(source: &PySource) -> PyResult<Vec<f64>> {
    Ok(diagnostics::oracle_1d(&source.inner).py()?.field().values().to_vec())
}

/// Projected gradient flow from `mu0`. Returns a dict with the final
/// `mu`, `u`, `t`, `energy`, `converged`, `steps` and the recorded `trajectory`.
#[pyfunction]
#[pyo3(signature = (source, params, mu0, dt0 = 0.1, t_max = 100.0, xi_tol = 1e-6, fixed_dt = false, record_every = 1))]
#[allow(clippy::too_many_arguments)]
fn run_flow<'py>(
    py: Python<'py>,
    source: &PySource,
    params: &PyParams,
    mu0: Vec<f64>,
    dt0: f64,
    t_max: f64,
    xi_tol: f64,
    fixed_dt: bool,
    record_every: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let mu0 = source.grid.density(mu0)?;
    let cfg = FlowConfig {
        dt0,
        t_max,
        xi_tol,
        record_every,
        dt_control: if fixed_dt { DtControl::Fixed } else { DtControl::default() },
        ..Default::default()
    };
    let (summary, state) = py.detach(|| flow::run_flow(mu0, &params.inner, &source.inner, &cfg)).py()?;
    let d = PyDict::new(py);
    d.set_item("mu", state.mu.values().to_vec())?;
    d.set_item("u", state.u.values().to_vec())?;
    d.set_item("t", state.t)?;
    d.set_item("xi_norm", state.xi_norm)?;
    d.set_item("energy", energy_dict(py, &state.energy)?)?;
    d.set_item("converged", summary.converged)?;
    d.set_item("steps", summary.steps)?;
    d.set_item("rejections", summary.rejections)?;
    let rows = summary
        .rows
        .iter()
        .map(|r| {
            let row = energy_dict(py, &r.energy)?;
            row.set_item("t", r.t)?;
            row.set_item("xi_norm", r.xi_norm)?;
            row.set_item("dt", r.dt)?;
            Ok(row)
        })
        .collect::<PyResult<Vec<_>>>()?;
    d.set_item("trajectory", rows)?;
    Ok(d)
}

/// Minimizing-movement chain in `d_w` with constant step `tau`.
#[pyfunction]
#[pyo3(signature = (source, params, mu0, basis, tau, steps, inner_tol = 1e-8, inner_max_iter = 2000))]
#[allow(clippy::too_many_arguments)]
fn run_jko<'py>(
    py: Python<'py>,
    source: &PySource,
    params: &PyParams,
    mu0: Vec<f64>,
    basis: &PyDwBasis,
    tau: f64,
    steps: usize,
    inner_tol: f64,
    inner_max_iter: usize,
) -> PyResult<Bound<'py, PyDict>> {
    let mu0 = source.grid.density(mu0)?;
    let cfg = JkoConfig { tau_schedule: vec![tau; steps], inner_tol, inner_max_iter, ..Default::default() };
    let traj = py.detach(|| metric::run_jko(mu0, &params.inner, &source.inner, &basis.inner, &cfg)).py()?;
    let d = PyDict::new(py);
    d.set_item("times", traj.times.clone())?;
    d.set_item("densities", traj.densities.iter().map(|m| m.values().to_vec()).collect::<Vec<_>>())?;
    d.set_item("energies", traj.energies.iter().map(|e| e.total).collect::<Vec<_>>())?;
    d.set_item("dw_increments", traj.steps.iter().map(|s| s.dw_increment).collect::<Vec<_>>())?;
    Ok(d)
}

/// Multi-start finite-difference minimization on small grids. Returns `(mu, value)`.
#[pyfunction]
#[pyo3(signature = (source, params, seed = 0, max_starts = 32))]
fn brute_force(source: &PySource, params: &PyParams, seed: u64, max_starts: usize, py: Python<'_>) -> PyResult<(Vec<f64>, f64)> {
    let opts = BruteForceOptions { seed, max_starts, ..Default::default() };
    let r = py.detach(|| diagnostics::brute_force_minimize(&params.inner, &source.inner, &opts)).py()?;
    Ok((r.density.values().to_vec(), r.value))
}

/// Runs a TOML experiment config; returns `(messages, written files)`.
#[pyfunction]
#[pyo3(signature = (text, output_dir = None))]
fn run_config(py: Python<'_>, text: &str, output_dir: Option<PathBuf>) -> PyResult<(Vec<String>, Vec<PathBuf>)> {
    let mut cfg = ExperimentConfig::from_toml_str(text).py()?;
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    let report = py.detach(|| run_experiment(&cfg)).py()?;
    Ok((report.messages, report.files))
}

#[pymodule]
#[pyo3(name = "transport_energy")]
pub fn py_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyGrid>()?;
    m.add_class::<PySource>()?;
    m.add_class::<PyParams>()?;
    m.add_class::<PyDwBasis>()?;
    m.add_function(wrap_pyfunction!(energy, m)?)?;
    m.add_function(wrap_pyfunction!(gradient, m)?)?;
    m.add_function(wrap_pyfunction!(minimal_subgradient, m)?)?;
    m.add_function(wrap_pyfunction!(potential, m)?)?;
    m.add_function(wrap_pyfunction!(residuals, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_1d, m)?)?;
    m.add_function(wrap_pyfunction!(run_flow, m)?)?;
    m.add_function(wrap_pyfunction!(run_jko, m)?)?;
    m.add_function(wrap_pyfunction!(brute_force, m)?)?;
    m.add_function(wrap_pyfunction!(run_config, m)?)?;
    Ok(())
}
