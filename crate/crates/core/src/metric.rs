//! The weak-* distance `d_w(μ,ν)² = Σ_k 2^{−k}|∫φ_k dμ − ∫φ_k dν|²` over a
//! truncated cosine family, and minimizing movements for `E + d_w²/2τ`.

use std::sync::Arc;

use crate::elliptic::{RegParams, SolverOptions, DEFAULT_SOLVER_TOL};
use crate::energy::{evaluate, gradient_from, min_subgradient_from, Density, EnergyBreakdown};
use crate::error::{Error, Result};
use crate::grid::{weighted_dot, Grid, ScalarField, SourceData};

pub const DEFAULT_K_1D: usize = 64;
pub const DEFAULT_K_2D: usize = 128;

/// Test functions `φ_0 ≡ 1, φ_1, …` with weights `2^{−k}`.
#[derive(Debug, Clone)]
pub struct DwBasis {
    grid: Arc<Grid>,
    test_functions: Vec<ScalarField>,
    weights: Vec<f64>,
    frequencies: Vec<[usize; 2]>,
}

/// Frequencies in order of increasing total frequency.
fn frequencies(dim: usize, k: usize) -> Vec<[usize; 2]> {
    let mut out = Vec::with_capacity(k);
    let mut total = 0;
    while out.len() < k {
        if dim == 1 {
            out.push([total, 0]);
        } else {
            for a in 0..=total {
                if out.len() == k {
                    break;
                }
                out.push([a, total - a]);
            }
        }
        total += 1;
    }
    out
}

pub fn build_dw_basis(grid: &Arc<Grid>, k: usize) -> Result<DwBasis> {
    if k == 0 {
        return Err(Error::InvalidParams("basis needs K >= 1".into()));
    }
    let lo = grid.lo().to_vec();
    let len: Vec<f64> = grid.hi().iter().zip(&lo).map(|(h, l)| h - l).collect();
    let freqs = frequencies(grid.dim(), k);
    let test_functions = freqs
        .iter()
        .map(|m| {
            let raw = ScalarField::from_fn(grid.clone(), |x| {
                (0..grid.dim())
                    .map(|a| (m[a] as f64 * std::f64::consts::PI * (x[a] - lo[a]) / len[a]).cos())
                    .product()
            });
            let s = raw.max_abs();
            raw.scaled(1.0 / s)
        })
        .collect();
    let weights = (0..k).map(|i| 0.5f64.powi(i as i32)).collect();
    Ok(DwBasis { grid: grid.clone(), test_functions, weights, frequencies: freqs })
}

impl DwBasis {
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn test_functions(&self) -> &[ScalarField] {
        &self.test_functions
    }
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn frequencies(&self) -> &[[usize; 2]] {
        &self.frequencies
    }

    fn check(&self, mu: &ScalarField) -> Result<()> {
        if mu.grid().as_ref() != self.grid.as_ref() {
            return Err(Error::GridMismatch);
        }
        Ok(())
    }

    /// `∫φ_k dμ` for every k.
    pub fn moments(&self, mu: &ScalarField) -> Result<Vec<f64>> {
        self.check(mu)?;
        let w = self.grid.weights();
        Ok(self
            .test_functions
            .iter()
            .map(|phi| weighted_dot(w, phi.values(), mu.values()))
            .collect())
    }

    fn dw_sq_moments(&self, a: &[f64], b: &[f64]) -> f64 {
        self.weights
            .iter()
            .zip(a.iter().zip(b))
            .map(|(w, (x, y))| w * (x - y) * (x - y))
            .sum()
    }

    /// Bound on the omitted terms `Σ_{k≥K} 2^{−k}|…|²` given total variations.
    pub fn tail_bound(&self, mass_mu: f64, mass_nu: f64) -> f64 {
        let s = mass_mu.abs() + mass_nu.abs();
        2f64.powi(1 - self.len() as i32) * s * s
    }
}

/// Squared truncated distance.
pub fn dw_sq(mu: &ScalarField, nu: &ScalarField, basis: &DwBasis) -> Result<f64> {
    mu.check_grid(nu)?;
    let a = basis.moments(mu)?;
    let b = basis.moments(nu)?;
    Ok(basis.dw_sq_moments(&a, &b))
}

pub fn dw(mu: &ScalarField, nu: &ScalarField, basis: &DwBasis) -> Result<f64> {
    dw_sq(mu, nu, basis).map(f64::sqrt)
}

fn total_variation(mu: &ScalarField) -> f64 {
    mu.grid().weights().iter().zip(mu.values()).map(|(w, v)| w * v.abs()).sum()
}

/// Upper bound on `d_∞² − d_K²` for the full (untruncated) metric.
pub fn dw_tail_bound(mu: &ScalarField, nu: &ScalarField, basis: &DwBasis) -> f64 {
    basis.tail_bound(total_variation(mu), total_variation(nu))
}

#[derive(Debug, Clone, PartialEq)]
pub struct JkoConfig {
    pub tau_schedule: Vec<f64>,
    pub inner_tol: f64,
    pub inner_max_iter: usize,
    pub solver_tol: f64,
}

impl Default for JkoConfig {
    fn default() -> Self {
        Self { tau_schedule: vec![0.1; 20], inner_tol: 1e-8, inner_max_iter: 2000, solver_tol: DEFAULT_SOLVER_TOL }
    }
}

impl JkoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tau_schedule.is_empty() || self.tau_schedule.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
            return Err(Error::InvalidParams("tau schedule must be non-empty with all steps positive".into()));
        }
        if !(self.inner_tol > 0.0) {
            return Err(Error::InvalidParams("inner_tol must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct JkoStep {
    pub density: Density,
    pub energy: EnergyBreakdown,
    /// `E(ν) + d_w(μ_k,ν)²/2τ` at the returned `ν`.
    pub objective: f64,
    /// `E(μ_k)`, the objective at the competitor `ν = μ_k`.
    pub start_energy: f64,
    pub dw_increment: f64,
    /// `‖ν − P(ν − ∇Φ(ν))‖`, the projected-gradient stationarity measure.
    pub projected_gradient: f64,
    pub xi_norm: f64,
    pub iterations: usize,
    pub converged: bool,
}

struct Trial {
    mu: Density,
    energy: EnergyBreakdown,
    objective: f64,
    grad: Vec<f64>,
    xi_norm: f64,
    u: Vec<f64>,
}

fn project(grid: &Grid, v: &mut [f64]) {
    for (i, x) in v.iter_mut().enumerate() {
        if grid.is_boundary(i) || *x < 0.0 {
            *x = 0.0;
        }
    }
}

/// One minimizing-movement step `argmin_ν E(ν) + d_w(μ_k,ν)²/2τ` over the
/// discrete cone, by monotone projected gradient with Barzilai–Borwein steps.
pub fn jko_step(
    mu_k: &Density,
    tau: f64,
    params: &RegParams,
    f: &SourceData,
    basis: &DwBasis,
    config: &JkoConfig,
) -> Result<JkoStep> {
    if !(tau > 0.0) {
        return Err(Error::InvalidParams("tau must be positive".into()));
    }
    let grid = mu_k.grid().clone();
    let w = grid.weights();
    let anchor = basis.moments(mu_k.field())?;
    let opts = SolverOptions::with_tol(config.solver_tol);

    let eval = |mu: Density, guess: Option<&[f64]>| -> Result<Trial> {
        let s = evaluate(&mu, params, f, &opts, guess)?;
        let m = basis.moments(mu.field())?;
        let dm: Vec<f64> = m.iter().zip(&anchor).map(|(a, b)| a - b).collect();
        let d2 = basis.dw_sq_moments(&m, &anchor);
        let mut grad = gradient_from(&grid, mu.values(), params, &s.grad_sq);
        for (k, phi) in basis.test_functions().iter().enumerate() {
            let c = basis.weights()[k] * dm[k] / tau;
            for (g, p) in grad.iter_mut().zip(phi.values()) {
                *g += c * p;
            }
        }
        project_boundary(&grid, &mut grad);
        let xi = min_subgradient_from(&mu, params, &s.grad_sq);
        let xi_norm = weighted_dot(w, &xi, &xi).sqrt();
        Ok(Trial {
            objective: s.energy.total + d2 / (2.0 * tau),
            energy: s.energy,
            mu,
            grad,
            xi_norm,
            u: s.u.into_field().into_values(),
        })
    };

    let pg_norm = |t: &Trial| -> f64 {
        let d: Vec<f64> = t
            .mu
            .values()
            .iter()
            .zip(&t.grad)
            .enumerate()
            .map(|(i, (m, g))| if grid.is_boundary(i) { 0.0 } else { m - (m - g).max(0.0) })
            .collect();
        weighted_dot(w, &d, &d).sqrt()
    };

    let mut cur = eval(mu_k.clone(), None)?;
    let start_energy = cur.objective;
    let mut step = 1.0 / cur.grad.iter().fold(0.0f64, |m, g| m.max(g.abs())).max(1.0 / tau).max(1.0);
    let mut pg = pg_norm(&cur);
    let mut iterations = 0;
    let mut stalled = false;
    const SIGMA: f64 = 1e-4;

    while pg > config.inner_tol && iterations < config.inner_max_iter {
        iterations += 1;
        let mut s = step;
        let next = loop {
            let mut v: Vec<f64> = cur.mu.values().iter().zip(&cur.grad).map(|(m, g)| m - s * g).collect();
            project(&grid, &mut v);
            let moved: Vec<f64> = cur.mu.values().iter().zip(&v).map(|(a, b)| a - b).collect();
            let decrease = weighted_dot(w, &cur.grad, &moved);
            if decrease <= 0.0 {
                break None;
            }
            let trial = eval(Density::from_values(grid.clone(), v)?, Some(&cur.u))?;
            if trial.objective <= cur.objective - SIGMA * decrease {
                break Some(trial);
            }
            s *= 0.5;
            if s < 1e-18 {
                break None;
            }
        };
        let Some(next) = next else {
            stalled = true;
            break;
        };
        // Barzilai–Borwein step from the accepted pair
        let dx: Vec<f64> = next.mu.values().iter().zip(cur.mu.values()).map(|(a, b)| a - b).collect();
        let dg: Vec<f64> = next.grad.iter().zip(&cur.grad).map(|(a, b)| a - b).collect();
        let sy = weighted_dot(w, &dx, &dg);
        let ss = weighted_dot(w, &dx, &dx);
        step = if sy > 0.0 { (ss / sy).clamp(1e-12, 1e6) } else { (2.0 * s).min(1e6) };
        cur = next;
        pg = pg_norm(&cur);
    }
    let converged = pg <= config.inner_tol;
    if !converged {
        log::debug!("jko inner loop stopped at pg={pg:.3e} after {iterations} iterations (stalled={stalled})");
    }
    let dw_increment = dw(cur.mu.field(), mu_k.field(), basis)?;
    Ok(JkoStep {
        density: cur.mu,
        energy: cur.energy,
        objective: cur.objective,
        start_energy,
        dw_increment,
        projected_gradient: pg,
        xi_norm: cur.xi_norm,
        iterations,
        converged,
    })
}

fn project_boundary(grid: &Grid, g: &mut [f64]) {
    for (i, x) in g.iter_mut().enumerate() {
        if grid.is_boundary(i) {
            *x = 0.0;
        }
    }
}

/// JKO iterates `μ_0, μ_1, …` at times `t_k = Σ_{j<k} τ_j`.
#[derive(Debug, Clone)]
pub struct JkoTrajectory {
    pub times: Vec<f64>,
    pub densities: Vec<Density>,
    pub energies: Vec<EnergyBreakdown>,
    /// Entry k describes the step from iterate k to k+1.
    pub steps: Vec<JkoStep>,
    pub initial_xi_norm: f64,
}

impl JkoTrajectory {
    pub fn taus(&self) -> Vec<f64> {
        self.times.windows(2).map(|w| w[1] - w[0]).collect()
    }
}

pub fn run_jko(
    mu0: Density,
    params: &RegParams,
    f: &SourceData,
    basis: &DwBasis,
    config: &JkoConfig,
) -> Result<JkoTrajectory> {
    config.validate()?;
    let s = evaluate(&mu0, params, f, &SolverOptions::with_tol(config.solver_tol), None)?;
    let xi = min_subgradient_from(&mu0, params, &s.grad_sq);
    let initial_xi_norm = weighted_dot(mu0.grid().weights(), &xi, &xi).sqrt();
    let mut times = vec![0.0];
    let mut energies = vec![s.energy];
    let mut densities = vec![mu0];
    let mut steps = Vec::with_capacity(config.tau_schedule.len());
    for &tau in &config.tau_schedule {
        let step = jko_step(densities.last().unwrap(), tau, params, f, basis, config)?;
        times.push(times.last().unwrap() + tau);
        energies.push(step.energy);
        densities.push(step.density.clone());
        steps.push(step);
    }
    Ok(JkoTrajectory { times, densities, energies, steps, initial_xi_norm })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EviReport {
    /// `(½d²(μ_{k+1},ν) − ½d²(μ_k,ν))/τ_k − (E(ν) − E(μ_{k+1}))` per step.
    pub residuals: Vec<f64>,
    pub violation_fraction: f64,
}

/// Discrete evolution-variational-inequality residuals against `nu`.
pub fn evi_residual(
    trajectory: &JkoTrajectory,
    nu: &Density,
    nu_energy: f64,
    basis: &DwBasis,
    tol: f64,
) -> Result<EviReport> {
    let d2: Vec<f64> = trajectory
        .densities
        .iter()
        .map(|m| dw_sq(m.field(), nu.field(), basis))
        .collect::<Result<_>>()?;
    let residuals: Vec<f64> = (0..trajectory.steps.len())
        .map(|k| {
            let tau = trajectory.times[k + 1] - trajectory.times[k];
            0.5 * (d2[k + 1] - d2[k]) / tau - (nu_energy - trajectory.energies[k + 1].total)
        })
        .collect();
    let bad = residuals.iter().filter(|r| **r > tol).count();
    let violation_fraction = if residuals.is_empty() { 0.0 } else { bad as f64 / residuals.len() as f64 };
    Ok(EviReport { residuals, violation_fraction })
}
