//! TOML-configured experiments: single flows, JKO chains, `(λ, δ)`
//! continuation sweeps and oracle checks.
//!
//! A config file looks like
//!
//! ```toml
//! schema_version = 1
//! mode = "flow"            # flow | jko | sweep | oracle-check
//! seed = 0
//! output_dir = "out"
//!
//! [grid]
//! n = [301]
//! lo = [-1.5]              # optional; derived from the source support otherwise
//! hi = [1.5]
//!
//! [[source.boxes]]
//! lo = [-1.0]
//! hi = [0.0]
//! value = 1.0
//!
//! [[source.boxes]]
//! lo = [0.0]
//! hi = [1.0]
//! value = -1.0
//!
//! [params]
//! lambda = 1e-3
//! delta = 1e-6
//! p = 2.0
//! ```
//!
//! Optional sections: `[flow]`, `[initial]`, `[jko]`, `[sweep]`, `[oracle_check]`.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{brute_force_minimize, oracle_1d, regularized_residuals, BruteForceOptions, ResidualReport};
use crate::elliptic::{RegParams, DEFAULT_SOLVER_TOL};
use crate::energy::{evaluate, Density, EnergyBreakdown};
use crate::elliptic::SolverOptions;
use crate::error::{Error, Result};
use crate::flow::{run_flow, run_flow_observed, DtControl, FlowConfig, FlowState};
use crate::grid::{build_grid, enclosing_domain, make_source, AxisBox, Grid, SourceData, SourceOptions, SourcePiece, SourceSpec};
use crate::io;
use crate::metric::{build_dw_basis, dw, evi_residual, run_jko, JkoConfig, DEFAULT_K_1D, DEFAULT_K_2D};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Flow,
    Jko,
    Sweep,
    OracleCheck,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flow" => Ok(Mode::Flow),
            "jko" => Ok(Mode::Jko),
            "sweep" => Ok(Mode::Sweep),
            "oracle-check" => Ok(Mode::OracleCheck),
            _ => Err(Error::Config(format!("unknown mode '{s}' (expected flow, jko, sweep or oracle-check)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub n: Vec<usize>,
    pub lo: Option<Vec<f64>>,
    pub hi: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxSection {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSection {
    #[serde(default)]
    pub boxes: Vec<BoxSection>,
    #[serde(default)]
    pub allow_mean_correction: bool,
    pub margin: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamsSection {
    pub lambda: f64,
    #[serde(default)]
    pub delta: f64,
    #[serde(default = "default_p")]
    pub p: f64,
}

fn default_p() -> f64 {
    2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DtControlKind {
    Fixed,
    #[default]
    Backtracking,
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub dt0: f64,
    pub dt_control: DtControlKind,
    pub sigma: f64,
    pub growth: f64,
    pub t_max: f64,
    pub xi_tol: f64,
    pub record_every: usize,
    pub solver_tol: f64,
    pub max_steps: usize,
    /// Write `snapshots/density_<step>.csv` at every recorded state.
    pub snapshots: bool,
}

impl Default for FlowSection {
    fn default() -> Self {
        let d = FlowConfig::default();
        let (sigma, growth) = match d.dt_control {
            DtControl::Backtracking { sigma, growth } => (sigma, growth),
            DtControl::Fixed => (0.1, 1.5),
        };
        Self {
            dt0: d.dt0,
            dt_control: DtControlKind::Backtracking,
            sigma,
            growth,
            t_max: d.t_max,
            xi_tol: d.xi_tol,
            record_every: d.record_every,
            solver_tol: d.solver_tol,
            max_steps: d.max_steps,
            snapshots: false,
        }
    }
}

impl FlowSection {
    pub fn to_config(&self) -> FlowConfig {
        FlowConfig {
            dt0: self.dt0,
            dt_control: match self.dt_control {
                DtControlKind::Fixed => DtControl::Fixed,
                DtControlKind::Backtracking => DtControl::Backtracking { sigma: self.sigma, growth: self.growth },
            },
            t_max: self.t_max,
            xi_tol: self.xi_tol,
            record_every: self.record_every,
            solver_tol: self.solver_tol,
            max_steps: self.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum InitialSection {
    /// The same value on every interior node.
    Constant { value: f64 },
    /// Independent uniform values in `[0, max)` drawn from the run seed.
    Random { max: f64 },
    /// The 1D closed-form minimizer.
    Oracle,
    /// A field CSV on the configured grid.
    File { path: PathBuf },
}

impl Default for InitialSection {
    fn default() -> Self {
        InitialSection::Constant { value: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JkoSection {
    pub tau: f64,
    pub steps: usize,
    /// Overrides `tau`/`steps` when present.
    pub tau_schedule: Option<Vec<f64>>,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub solver_tol: f64,
    /// Truncation order of the distance; 64 in 1D and 128 in 2D by default.
    pub basis_size: Option<usize>,
}

impl Default for JkoSection {
    fn default() -> Self {
        let d = JkoConfig::default();
        Self {
            tau: d.tau_schedule[0],
            steps: d.tau_schedule.len(),
            tau_schedule: None,
            inner_tol: d.inner_tol,
            inner_max_iter: d.inner_max_iter,
            solver_tol: d.solver_tol,
            basis_size: None,
        }
    }
}

impl JkoSection {
    pub fn to_config(&self) -> JkoConfig {
        JkoConfig {
            tau_schedule: self.tau_schedule.clone().unwrap_or_else(|| vec![self.tau; self.steps]),
            inner_tol: self.inner_tol,
            inner_max_iter: self.inner_max_iter,
            solver_tol: self.solver_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub lambdas: Vec<f64>,
    pub deltas: Vec<f64>,
    #[serde(default = "default_true")]
    pub warm_start: bool,
    pub basis_size: Option<usize>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleCheckSection {
    pub max_starts: usize,
    pub agree_tol: f64,
    pub jko_tau: f64,
    pub jko_max_steps: usize,
}

impl Default for OracleCheckSection {
    fn default() -> Self {
        let d = BruteForceOptions::default();
        Self { max_starts: d.max_starts, agree_tol: d.agree_tol, jko_tau: 10.0, jko_max_steps: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub mode: Mode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    pub grid: GridSection,
    #[serde(default)]
    pub source: SourceSection,
    pub params: ParamsSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub initial: InitialSection,
    pub jko: Option<JkoSection>,
    pub sweep: Option<SweepSection>,
    #[serde(default)]
    pub oracle_check: OracleCheckSection,
}

fn default_output() -> PathBuf {
    PathBuf::from("output")
}

fn strictly_decreasing_positive(v: &[f64]) -> bool {
    !v.is_empty() && v.iter().all(|x| *x > 0.0 && x.is_finite()) && v.windows(2).all(|w| w[1] < w[0])
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        let dim = self.grid.n.len();
        if !(1..=2).contains(&dim) {
            return Err(Error::Config("grid.n must have one or two entries".into()));
        }
        match (&self.grid.lo, &self.grid.hi) {
            (Some(lo), Some(hi)) if lo.len() == dim && hi.len() == dim => {}
            (None, None) => {
                if self.source.boxes.is_empty() {
                    return Err(Error::Config("grid.lo/hi are required when the source is empty".into()));
                }
            }
            _ => return Err(Error::Config("grid.lo and grid.hi must both be given with one entry per axis".into())),
        }
        if self.source.boxes.iter().any(|b| b.lo.len() != dim || b.hi.len() != dim) {
            return Err(Error::Config("every source box needs one lo/hi entry per grid axis".into()));
        }
        match self.mode {
            Mode::Sweep => {
                let s = self.sweep.as_ref().ok_or_else(|| Error::Config("mode sweep needs a [sweep] section".into()))?;
                if !strictly_decreasing_positive(&s.lambdas) || !strictly_decreasing_positive(&s.deltas) {
                    return Err(Error::Config("sweep lambdas and deltas must be positive and strictly decreasing".into()));
                }
            }
            Mode::Jko => {
                if self.jko.is_none() {
                    return Err(Error::Config("mode jko needs a [jko] section".into()));
                }
            }
            Mode::OracleCheck => {
                if dim != 1 {
                    return Err(Error::Config("oracle-check runs on one-dimensional grids".into()));
                }
            }
            Mode::Flow => {}
        }
        Ok(())
    }
}

/// Built objects shared by every mode.
#[derive(Debug, Clone)]
pub struct Problem {
    pub grid: Arc<Grid>,
    pub source: SourceData,
    pub params: RegParams,
}

impl Problem {
    pub fn from_config(cfg: &ExperimentConfig) -> Result<Self> {
        let dim = cfg.grid.n.len();
        let pieces: Vec<SourcePiece> = cfg
            .source
            .boxes
            .iter()
            .map(|b| Ok(SourcePiece { region: AxisBox::new(b.lo.clone(), b.hi.clone())?, value: b.value }))
            .collect::<Result<_>>()?;
        let (lo, hi) = match (&cfg.grid.lo, &cfg.grid.hi) {
            (Some(lo), Some(hi)) => (lo.clone(), hi.clone()),
            _ => {
                let support = pieces
                    .iter()
                    .map(|p| p.region.clone())
                    .reduce(|a, b| a.hull(&b))
                    .ok_or_else(|| Error::Config("cannot derive a domain from an empty source".into()))?;
                let d = enclosing_domain(&support, cfg.source.margin);
                (d.lo, d.hi)
            }
        };
        let grid = build_grid(dim, &lo, &hi, &cfg.grid.n)?;
        let options = SourceOptions { allow_mean_correction: cfg.source.allow_mean_correction, margin: cfg.source.margin };
        let source = make_source(&grid, SourceSpec::PiecewiseConstant(pieces), options)?;
        let params = RegParams::new(cfg.params.lambda, cfg.params.delta, cfg.params.p)?;
        params.check_dim(dim)?;
        Ok(Self { grid, source, params })
    }

    pub fn initial_density(&self, initial: &InitialSection, seed: u64) -> Result<Density> {
        match initial {
            InitialSection::Constant { value } => Density::constant_interior(self.grid.clone(), *value),
            InitialSection::Random { max } => {
                if !(*max > 0.0) {
                    return Err(Error::Config("initial.max must be positive".into()));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let v = (0..self.grid.len())
                    .map(|i| if self.grid.is_boundary(i) { 0.0 } else { rng.random_range(0.0..*max) })
                    .collect();
                Density::from_values(self.grid.clone(), v)
            }
            InitialSection::Oracle => oracle_1d(&self.source),
            InitialSection::File { path } => Density::new(io::read_field_csv(path, &self.grid)?),
        }
    }
}

/// Summary of a finished run.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub mode: Mode,
    pub files: Vec<PathBuf>,
    pub messages: Vec<String>,
}

/// Exit status for an error: 1 for configuration problems, 2 for numerical failures.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::SolverDiverged { .. } | Error::StepUnderflow(_) | Error::NonReproducible { .. } => 2,
        _ => 1,
    }
}

fn basis_size(dim: usize, explicit: Option<usize>) -> usize {
    explicit.unwrap_or(if dim == 1 { DEFAULT_K_1D } else { DEFAULT_K_2D })
}

fn residuals_of(state: &FlowState, problem: &Problem, params: &RegParams) -> Result<ResidualReport> {
    regularized_residuals(&state.mu, state.u.field(), params, &problem.source)
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let problem = Problem::from_config(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let out = |name: &str| cfg.output_dir.join(name);
    let mut report = RunReport { mode: cfg.mode, files: Vec::new(), messages: Vec::new() };
    match cfg.mode {
        Mode::Flow => {
            let mu0 = problem.initial_density(&cfg.initial, cfg.seed)?;
            let snap_dir = out("snapshots");
            if cfg.flow.snapshots {
                fs::create_dir_all(&snap_dir)?;
            }
            let mut snap_files = Vec::new();
            let mut snap_err = None;
            let (summary, state) =
                run_flow_observed(mu0, &problem.params, &problem.source, &cfg.flow.to_config(), |s, step| {
                    if !cfg.flow.snapshots || snap_err.is_some() {
                        return;
                    }
                    let path = snap_dir.join(format!("density_{step:07}.csv"));
                    match io::write_field_csv(&path, s.mu.field()) {
                        Ok(()) => snap_files.push(path),
                        Err(e) => snap_err = Some(e),
                    }
                })?;
            if let Some(e) = snap_err {
                return Err(e);
            }
            report.files.extend(snap_files);
            let residuals = residuals_of(&state, &problem, &problem.params)?;
            io::write_trajectory_csv(&out("trajectory.csv"), &summary.rows)?;
            io::write_field_csv(&out("density.csv"), state.mu.field())?;
            io::write_field_csv(&out("potential.csv"), state.u.field())?;
            io::write_residual_csv(&out("residuals.csv"), &residuals)?;
            report.files.extend(["trajectory.csv", "density.csv", "potential.csv", "residuals.csv"].map(out));
            report.messages.push(format!(
                "flow: {} after {} steps, t = {}, E = {:.10}, |xi*| = {:.3e}",
                if summary.converged { "converged" } else { "not converged" },
                summary.steps,
                state.t,
                state.energy.total,
                state.xi_norm
            ));
        }
        Mode::Jko => {
            let section = cfg.jko.clone().unwrap_or_default();
            let mu0 = problem.initial_density(&cfg.initial, cfg.seed)?;
            let basis = build_dw_basis(&problem.grid, basis_size(problem.grid.dim(), section.basis_size))?;
            let traj = run_jko(mu0, &problem.params, &problem.source, &basis, &section.to_config())?;
            io::write_jko_csv(&out("jko_trajectory.csv"), &traj)?;
            let last = traj.densities.last().expect("non-empty trajectory");
            io::write_field_csv(&out("density.csv"), last.field())?;
            let s = evaluate(last, &problem.params, &problem.source, &SolverOptions::with_tol(section.solver_tol), None)?;
            let residuals = regularized_residuals(last, s.u.field(), &problem.params, &problem.source)?;
            io::write_residual_csv(&out("residuals.csv"), &residuals)?;
            report.files.extend(["jko_trajectory.csv", "density.csv", "residuals.csv"].map(out));
            if problem.grid.dim() == 1 {
                let oracle = oracle_1d(&problem.source)?;
                let e = evaluate(&oracle, &problem.params, &problem.source, &SolverOptions::default(), None)?.energy;
                let evi = evi_residual(&traj, &oracle, e.total, &basis, 1e-8)?;
                io::write_table(
                    &out("evi.csv"),
                    &["step", "t", "evi_residual"],
                    evi.residuals.iter().enumerate().map(|(k, r)| (k, traj.times[k + 1], *r)),
                )?;
                report.files.push(out("evi.csv"));
                report.messages.push(format!("jko: EVI violation fraction vs oracle {:.3}", evi.violation_fraction));
            }
            let unconverged = traj.steps.iter().filter(|s| !s.converged).count();
            report.messages.push(format!(
                "jko: {} steps, final E = {:.10}, {} inner solves stopped before inner_tol",
                traj.steps.len(),
                traj.energies.last().unwrap().total,
                unconverged
            ));
        }
        Mode::Sweep => {
            let section = cfg.sweep.as_ref().expect("validated");
            let rows = run_sweep(&problem, cfg, section)?;
            let header = [
                "lambda",
                "delta",
                "status",
                "E_total",
                "L",
                "M",
                "sobolev",
                "dw_to_oracle",
                "steps",
                "xi_norm",
                "pde_residual",
                "eikonal_excess",
                "stationarity",
                "complementarity",
            ];
            io::write_table(&out("sweep_summary.csv"), &header, rows.iter().map(SweepRow::record))?;
            report.files.push(out("sweep_summary.csv"));
            for r in &rows {
                if let Some(mu) = &r.density {
                    let name = format!("density_l{}_d{}.csv", r.i, r.j);
                    io::write_field_csv(&out(&name), mu.field())?;
                    report.files.push(out(&name));
                }
                if let Some(msg) = &r.error {
                    report.messages.push(format!("sweep cell (lambda={}, delta={}) failed: {msg}", r.lambda, r.delta));
                }
            }
            report.messages.push(format!("sweep: {} cells", rows.len()));
        }
        Mode::OracleCheck => {
            let rows = run_oracle_check(&problem, cfg)?;
            io::write_table(
                &out("oracle_check.csv"),
                &["method", "energy", "linf_to_brute_force", "linf_to_oracle"],
                rows.iter().map(|r| (r.method.as_str(), r.energy, r.linf_to_brute_force, r.linf_to_oracle)),
            )?;
            report.files.push(out("oracle_check.csv"));
            let worst = rows.iter().map(|r| r.linf_to_brute_force).fold(0.0, f64::max);
            report.messages.push(format!("oracle-check: worst disagreement with brute force {worst:.3e}"));
        }
    }
    Ok(report)
}

/// Result of one `(λ_i, δ_j)` cell of a sweep.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub i: usize,
    pub j: usize,
    pub lambda: f64,
    pub delta: f64,
    pub energy: Option<EnergyBreakdown>,
    pub dw_to_oracle: Option<f64>,
    pub steps: usize,
    pub xi_norm: f64,
    pub converged: bool,
    pub residuals: Option<ResidualReport>,
    pub density: Option<Density>,
    pub error: Option<String>,
}

type SweepRecord = (f64, f64, &'static str, f64, f64, f64, f64, f64, usize, f64, f64, f64, f64, f64);

impl SweepRow {
    fn record(&self) -> SweepRecord {
        let e = self.energy.unwrap_or(EnergyBreakdown { l: f64::NAN, mass: f64::NAN, sobolev: f64::NAN, total: f64::NAN });
        let r = self
            .residuals
            .map(|r| io::residual_values(&r))
            .unwrap_or([f64::NAN; 4]);
        let status = match (&self.error, self.converged) {
            (Some(_), _) => "failed",
            (None, true) => "converged",
            (None, false) => "not-converged",
        };
        (
            self.lambda,
            self.delta,
            status,
            e.total,
            e.l,
            e.mass,
            e.sobolev,
            self.dw_to_oracle.unwrap_or(f64::NAN),
            self.steps,
            self.xi_norm,
            r[0],
            r[1],
            r[2],
            r[3],
        )
    }
}

/// Iterated-limit sweep: for each `λ_i` an inner chain over `δ_j`, each run
/// started from the previous minimizer of the chain. Chains run in parallel.
pub fn run_sweep(problem: &Problem, cfg: &ExperimentConfig, section: &SweepSection) -> Result<Vec<SweepRow>> {
    let mu0 = problem.initial_density(&cfg.initial, cfg.seed)?;
    let oracle = if problem.grid.dim() == 1 { Some(oracle_1d(&problem.source)?) } else { None };
    let basis = build_dw_basis(&problem.grid, basis_size(problem.grid.dim(), section.basis_size))?;
    let flow = cfg.flow.to_config();
    let chains: Vec<Vec<SweepRow>> = section
        .lambdas
        .par_iter()
        .enumerate()
        .map(|(i, &lambda)| {
            let mut start = mu0.clone();
            let mut rows = Vec::with_capacity(section.deltas.len());
            for (j, &delta) in section.deltas.iter().enumerate() {
                let mut row = SweepRow {
                    i,
                    j,
                    lambda,
                    delta,
                    energy: None,
                    dw_to_oracle: None,
                    steps: 0,
                    xi_norm: f64::NAN,
                    converged: false,
                    residuals: None,
                    density: None,
                    error: None,
                };
                let result = RegParams::new(lambda, delta, problem.params.p).and_then(|params| {
                    let (summary, state) = run_flow(start.clone(), &params, &problem.source, &flow)?;
                    let residuals = residuals_of(&state, problem, &params)?;
                    Ok((summary, state, residuals))
                });
                match result {
                    Ok((summary, state, residuals)) => {
                        row.energy = Some(state.energy);
                        row.steps = summary.steps;
                        row.xi_norm = state.xi_norm;
                        row.converged = summary.converged;
                        row.residuals = Some(residuals);
                        if let Some(o) = &oracle {
                            row.dw_to_oracle = dw(state.mu.field(), o.field(), &basis).ok();
                        }
                        if section.warm_start {
                            start = state.mu.clone();
                        }
                        row.density = Some(state.mu);
                    }
                    Err(e) => {
                        log::warn!("sweep cell lambda={lambda} delta={delta} failed: {e}");
                        row.error = Some(e.to_string());
                    }
                }
                rows.push(row);
            }
            rows
        })
        .collect();
    Ok(chains.into_iter().flatten().collect())
}

#[derive(Debug, Clone)]
pub struct OracleCheckRow {
    pub method: String,
    pub energy: f64,
    pub linf_to_brute_force: f64,
    pub linf_to_oracle: f64,
}

/// Minimizes with the flow, a JKO chain and brute force on the same grid and
/// compares all three with each other and with the unregularized oracle.
pub fn run_oracle_check(problem: &Problem, cfg: &ExperimentConfig) -> Result<Vec<OracleCheckRow>> {
    let opts = BruteForceOptions {
        seed: cfg.seed,
        max_starts: cfg.oracle_check.max_starts,
        agree_tol: cfg.oracle_check.agree_tol,
        ..Default::default()
    };
    let params = &problem.params;
    let f = &problem.source;
    let oracle = oracle_1d(f)?;
    let bf = brute_force_minimize(params, f, &opts)?;
    let mu0 = problem.initial_density(&cfg.initial, cfg.seed)?;
    let (_, flow_state) = run_flow(mu0.clone(), params, f, &cfg.flow.to_config())?;

    let basis = build_dw_basis(&problem.grid, DEFAULT_K_1D)?;
    let jko_cfg = JkoConfig {
        tau_schedule: vec![cfg.oracle_check.jko_tau],
        inner_tol: 1e-11,
        inner_max_iter: 20_000,
        solver_tol: 1e-12,
    };
    let mut mu = mu0;
    for _ in 0..cfg.oracle_check.jko_max_steps {
        let step = crate::metric::jko_step(&mu, cfg.oracle_check.jko_tau, params, f, &basis, &jko_cfg)?;
        let moved = step.density.field().linf_distance(mu.field())?;
        mu = step.density;
        if moved < 1e-13 {
            break;
        }
    }
    let energy = |m: &Density| -> Result<f64> {
        Ok(evaluate(m, params, f, &SolverOptions::with_tol(DEFAULT_SOLVER_TOL), None)?.energy.total)
    };
    let row = |name: &str, m: &Density| -> Result<OracleCheckRow> {
        Ok(OracleCheckRow {
            method: name.to_string(),
            energy: energy(m)?,
            linf_to_brute_force: m.field().linf_distance(bf.density.field())?,
            linf_to_oracle: m.field().linf_distance(oracle.field())?,
        })
    };
    Ok(vec![
        row("flow", &flow_state.mu)?,
        row("jko", &mu)?,
        row("brute-force", &bf.density)?,
        row("oracle", &oracle)?,
    ])
}

/// Applies command-line overrides and runs; returns the process exit status.
pub fn run_from_path(
    path: &Path,
    output_dir: Option<PathBuf>,
    seed: Option<u64>,
    mode: Option<Mode>,
) -> std::result::Result<RunReport, (i32, Error)> {
    let mut cfg = ExperimentConfig::load(path).map_err(|e| (1, e))?;
    if let Some(d) = output_dir {
        cfg.output_dir = d;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(m) = mode {
        cfg.mode = m;
    }
    run_experiment(&cfg).map_err(|e| (exit_code(&e), e))
}
