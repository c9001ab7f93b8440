//! Weighted Neumann problem `−div((μ+λ)∇u) = f`, `∂ₙu = 0`, `∫u = 0`.
//!
//! The discrete operator is `K = Gᵀ W_e C G` with `G` the midpoint gradient,
//! `W_e` the edge quadrature weights and `C` the arithmetic mean of `μ+λ` at
//! the two endpoints of each edge. `K` is symmetric positive semidefinite
//! with the constants as its kernel; the system `K u = W f` is consistent
//! whenever `∫f = 0` and is solved by preconditioned conjugate gradients on
//! the mean-zero subspace.

use std::sync::Arc;

use crate::energy::Density;
use crate::error::{Error, Result};
use crate::grid::{grad_values, Grid, ScalarField, SourceData};

/// Regularization triple `(λ, δ, p)` and the conjugate exponent `q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegParams {
    pub lambda: f64,
    pub delta: f64,
    pub p: f64,
    pub q: f64,
}

impl RegParams {
    pub fn new(lambda: f64, delta: f64, p: f64) -> Result<Self> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::InvalidParams(format!("lambda must be positive, got {lambda}")));
        }
        if !(delta.is_finite() && delta >= 0.0) {
            return Err(Error::InvalidParams(format!("delta must be nonnegative, got {delta}")));
        }
        if !(p.is_finite() && p > 1.0) {
            return Err(Error::InvalidParams(format!("p must be finite and > 1, got {p}")));
        }
        Ok(Self { lambda, delta, p, q: p / (p - 1.0) })
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        Self::new(lambda, self.delta, self.p)
    }

    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        Self::new(self.lambda, delta, self.p)
    }

    /// Checks `p > dim`, the embedding condition into continuous functions.
    pub fn check_dim(&self, dim: usize) -> Result<()> {
        if self.p > dim as f64 {
            Ok(())
        } else {
            Err(Error::InvalidParams(format!("p = {} must exceed the dimension {dim}", self.p)))
        }
    }
}

/// A zero-mean nodal potential.
#[derive(Debug, Clone, PartialEq)]
pub struct Potential {
    field: ScalarField,
}

impl Potential {
    pub fn field(&self) -> &ScalarField {
        &self.field
    }
    pub fn values(&self) -> &[f64] {
        self.field.values()
    }
    pub fn into_field(self) -> ScalarField {
        self.field
    }
    pub fn from_field(field: ScalarField) -> Self {
        Self { field }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveReport {
    pub iterations: usize,
    /// `‖W f − K u‖₂ / ‖W f‖₂` after the solve.
    pub residual_norm: f64,
    /// `∫(μ+λ)|∇u|²` at the returned potential.
    pub dirichlet_energy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    /// Defaults to `10·n + 100` when `None`.
    pub max_iter: Option<usize>,
}

pub const DEFAULT_SOLVER_TOL: f64 = 1e-10;

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_SOLVER_TOL, max_iter: None }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, max_iter: None }
    }
}

enum Preconditioner {
    /// Exact solve of the tridiagonal system with the first node pinned.
    Tridiagonal { sub: Vec<f64>, inv_diag: Vec<f64> },
    Jacobi(Vec<f64>),
}

pub(crate) struct WeightedOperator {
    grid: Arc<Grid>,
    /// `w_e · c_e / h²` per edge.
    stiffness: Vec<f64>,
    precond: Preconditioner,
}

impl WeightedOperator {
    /// Assembles the operator for conductivity `mu + lambda`.
    pub(crate) fn new(grid: &Arc<Grid>, mu: &[f64], lambda: f64) -> Self {
        let stiffness: Vec<f64> = grid
            .edges()
            .iter()
            .map(|e| {
                let c = 0.5 * (mu[e.tail] + mu[e.head]) + lambda;
                let h = grid.h()[e.axis];
                e.weight * c / (h * h)
            })
            .collect();
        let precond = if grid.dim() == 1 {
            tridiagonal_factor(&stiffness)
        } else {
            let mut diag = vec![0.0; grid.len()];
            for (e, k) in grid.edges().iter().zip(&stiffness) {
                diag[e.tail] += k;
                diag[e.head] += k;
            }
            Preconditioner::Jacobi(diag.into_iter().map(|d| 1.0 / d).collect())
        };
        Self { grid: grid.clone(), stiffness, precond }
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (e, k) in self.grid.edges().iter().zip(&self.stiffness) {
            let flux = k * (x[e.head] - x[e.tail]);
            out[e.tail] -= flux;
            out[e.head] += flux;
        }
    }

    /// Size of the residual that rounding alone produces when applying the
    /// operator to `x`; high-contrast conductivities can push it above `tol`.
    fn rounding_floor(&self, x: &[f64]) -> f64 {
        let mut a = vec![0.0; x.len()];
        for (e, k) in self.grid.edges().iter().zip(&self.stiffness) {
            let m = k.abs() * (x[e.head].abs() + x[e.tail].abs());
            a[e.tail] += m;
            a[e.head] += m;
        }
        8.0 * f64::EPSILON * dot(&a, &a).sqrt()
    }

    fn precondition(&self, r: &[f64], z: &mut [f64]) {
        match &self.precond {
            Preconditioner::Jacobi(inv) => {
                for ((z, r), d) in z.iter_mut().zip(r).zip(inv) {
                    *z = r * d;
                }
            }
            Preconditioner::Tridiagonal { sub, inv_diag } => {
                // unknowns 1..n, node 0 pinned at zero
                let n = r.len();
                z[0] = 0.0;
                let mut y = vec![0.0; n];
                y[1] = r[1];
                for i in 2..n {
                    y[i] = r[i] - sub[i] * y[i - 1];
                }
                z[n - 1] = y[n - 1] * inv_diag[n - 1];
                for i in (1..n - 1).rev() {
                    // upper off-diagonal of row i is −k_{i,i+1}
                    z[i] = (y[i] + self.stiffness[i] * z[i + 1]) * inv_diag[i];
                }
            }
        }
    }
}

/// LDLᵀ-style factorization of the 1D stiffness matrix restricted to nodes `1..n`.
fn tridiagonal_factor(k: &[f64]) -> Preconditioner {
    let n = k.len() + 1;
    let diag = |i: usize| -> f64 {
        let left = if i > 0 { k[i - 1] } else { 0.0 };
        let right = if i < n - 1 { k[i] } else { 0.0 };
        left + right
    };
    let mut sub = vec![0.0; n];
    let mut d = vec![0.0; n];
    d[1] = diag(1);
    for i in 2..n {
        // row i has lower entry −k[i−1]; multiplier l_i = −k[i−1] / d_{i−1}
        let l = -k[i - 1] / d[i - 1];
        sub[i] = l;
        d[i] = diag(i) - l * (-k[i - 1]);
    }
    let inv_diag = d.into_iter().map(|v| if v != 0.0 { 1.0 / v } else { 0.0 }).collect();
    Preconditioner::Tridiagonal { sub, inv_diag }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

fn project_mean(v: &mut [f64]) {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= m);
}

/// Solves `−div((μ+λ)∇u) = rhs` for the unique zero-mean `u`.
///
/// `mu` only needs `μ + λ > 0`; `initial_guess` warm-starts the iteration.
pub fn solve_weighted_neumann_rhs(
    mu: &ScalarField,
    lambda: f64,
    rhs: &ScalarField,
    options: &SolverOptions,
    initial_guess: Option<&[f64]>,
) -> Result<(Potential, SolveReport)> {
    mu.check_grid(rhs)?;
    if !(lambda > 0.0) {
        return Err(Error::InvalidParams("weighted solves require lambda > 0".into()));
    }
    if let Some(v) = mu.values().iter().find(|v| **v + lambda <= 0.0) {
        return Err(Error::InvalidDensity(format!("conductivity mu + lambda must be positive (mu = {v})")));
    }
    let grid = mu.grid().clone();
    let op = WeightedOperator::new(&grid, mu.values(), lambda);
    let (u, iterations, residual_norm) = pcg(&op, &grid, rhs.values(), options, initial_guess)?;
    let u = ScalarField::from_vec_unchecked(grid, u);
    let dirichlet_energy = dirichlet_energy_values(mu, lambda, &u);
    Ok((Potential { field: u }, SolveReport { iterations, residual_norm, dirichlet_energy }))
}

/// Solves the state equation for `u_μ` given a density and source.
pub fn solve_weighted_neumann(
    mu: &Density,
    params: &RegParams,
    f: &SourceData,
    tol: f64,
) -> Result<(Potential, SolveReport)> {
    solve_weighted_neumann_rhs(mu.field(), params.lambda, f.field(), &SolverOptions::with_tol(tol), None)
}

fn pcg(
    op: &WeightedOperator,
    grid: &Grid,
    rhs: &[f64],
    options: &SolverOptions,
    guess: Option<&[f64]>,
) -> Result<(Vec<f64>, usize, f64)> {
    let n = grid.len();
    let mut b: Vec<f64> = rhs.iter().zip(grid.weights()).map(|(f, w)| f * w).collect();
    project_mean(&mut b);
    let bnorm = dot(&b, &b).sqrt();
    if bnorm == 0.0 {
        return Ok((vec![0.0; n], 0, 0.0));
    }
    let max_iter = options.max_iter.unwrap_or(10 * n + 100);
    let mut x = match guess {
        Some(g) if g.len() == n => g.to_vec(),
        _ => vec![0.0; n],
    };
    let mut r = vec![0.0; n];
    let mut z = vec![0.0; n];
    let mut q = vec![0.0; n];
    let mut iterations = 0;

    // Outer loop restarts from the true residual to remove recursion drift.
    for _restart in 0..4 {
        op.apply(&x, &mut q);
        for i in 0..n {
            r[i] = b[i] - q[i];
        }
        project_mean(&mut r);
        let rnorm = dot(&r, &r).sqrt();
        if rnorm / bnorm <= options.tol || rnorm <= op.rounding_floor(&x) {
            break;
        }
        op.precondition(&r, &mut z);
        let mut p = z.clone();
        let mut rz = dot(&r, &z);
        while iterations < max_iter {
            op.apply(&p, &mut q);
            let pq = dot(&p, &q);
            if pq <= 0.0 {
                break;
            }
            let alpha = rz / pq;
            for i in 0..n {
                x[i] += alpha * p[i];
                r[i] -= alpha * q[i];
            }
            project_mean(&mut r);
            iterations += 1;
            if dot(&r, &r).sqrt() / bnorm <= options.tol {
                break;
            }
            op.precondition(&r, &mut z);
            let rz_new = dot(&r, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        if iterations >= max_iter {
            break;
        }
    }
    // final true residual
    op.apply(&x, &mut q);
    for i in 0..n {
        r[i] = b[i] - q[i];
    }
    project_mean(&mut r);
    let rnorm = dot(&r, &r).sqrt();
    let true_rel = rnorm / bnorm;
    if !(true_rel <= options.tol) && !(rnorm <= op.rounding_floor(&x)) {
        return Err(Error::SolverDiverged { iterations, residual: true_rel });
    }

    let volume: f64 = grid.weights().iter().sum();
    let mean = grid.weights().iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() / volume;
    x.iter_mut().for_each(|v| *v -= mean);
    Ok((x, iterations, true_rel))
}

fn dirichlet_energy_values(mu: &ScalarField, lambda: f64, u: &ScalarField) -> f64 {
    let grid = mu.grid();
    let g = grad_values(grid, u.values());
    let m = mu.values();
    grid.edges()
        .iter()
        .zip(&g)
        .map(|(e, g)| e.weight * (0.5 * (m[e.tail] + m[e.head]) + lambda) * g * g)
        .sum()
}

/// `∫(μ+λ)|∇u|²` with the same edge conductivities as the solver's bilinear form.
pub fn dirichlet_energy(mu: &ScalarField, params: &RegParams, u: &ScalarField) -> Result<f64> {
    mu.check_grid(u)?;
    Ok(dirichlet_energy_values(mu, params.lambda, u))
}

/// Relative nodal residual `‖div((μ+λ)∇u) + f‖_{L²} / ‖f‖_{L²}` in the
/// trapezoid norm; absolute when `f = 0`.
pub fn pde_residual(mu: &ScalarField, lambda: f64, u: &ScalarField, f: &ScalarField) -> Result<f64> {
    mu.check_grid(u)?;
    mu.check_grid(f)?;
    let grid = mu.grid();
    let op = WeightedOperator::new(grid, mu.values(), lambda);
    let mut ku = vec![0.0; grid.len()];
    op.apply(u.values(), &mut ku);
    // K u = W·(−div(c∇u)), so the nodal residual is f − K u / w
    let w = grid.weights();
    let res: f64 = (0..grid.len())
        .map(|i| {
            let r = f.values()[i] - ku[i] / w[i];
            w[i] * r * r
        })
        .sum::<f64>()
        .sqrt();
    let fnorm = f.l2_norm();
    Ok(if fnorm > 0.0 { res / fnorm } else { res })
}
