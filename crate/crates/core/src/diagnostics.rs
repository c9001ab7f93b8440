//! Optimality-system residuals, the 1D closed-form minimizer, and an
//! independent brute-force minimizer for tiny grids.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::elliptic::{pde_residual, RegParams, SolverOptions};
use crate::energy::{evaluate_values, p_laplacian, Density, DEFAULT_SUPPORT_REL};
use crate::error::{Error, Result};
use crate::grid::{grad_values, node_grad_sq, weighted_dot, ScalarField, SourceData, SourceSpec};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResidualReport {
    /// `‖div((μ+λ)∇u) + f‖ / ‖f‖`.
    pub pde_residual: f64,
    /// `max_{μ≤ε} (|∇u|² − 1)⁺`.
    pub eikonal_excess: f64,
    /// `max_{μ>ε} |1 − |∇u|² − δpΔ_pμ|`.
    pub stationarity: f64,
    /// `∫μ(1 − |∇u|)⁺ + ∫μ(|∇u| − 1)⁺`.
    pub complementarity: f64,
}

fn support_threshold(mu: &ScalarField) -> f64 {
    DEFAULT_SUPPORT_REL * mu.values().iter().fold(0.0f64, |m, v| m.max(*v))
}

fn residuals(mu: &ScalarField, u: &ScalarField, f: &SourceData, lambda: f64, station: &[f64]) -> Result<ResidualReport> {
    mu.check_grid(u)?;
    mu.check_grid(f.field())?;
    let grid = mu.grid();
    let pde = pde_residual(mu, lambda, u, f.field())?;
    let gsq = node_grad_sq(grid, &grad_values(grid, u.values()));
    let eps = support_threshold(mu);
    let mut eikonal = 0.0f64;
    let mut stationarity = 0.0f64;
    let mut comp = vec![0.0; grid.len()];
    for i in grid.interior_nodes() {
        let m = mu.values()[i];
        if m > eps {
            stationarity = stationarity.max(station[i].abs());
        } else {
            eikonal = eikonal.max((gsq[i] - 1.0).max(0.0));
        }
        comp[i] = m.max(0.0) * (1.0 - gsq[i].sqrt()).abs();
    }
    let ones = vec![1.0; grid.len()];
    Ok(ResidualReport {
        pde_residual: pde,
        eikonal_excess: eikonal,
        stationarity,
        complementarity: weighted_dot(grid.weights(), &comp, &ones),
    })
}

/// Residuals of the unregularized system `−div(μ∇u) = f`, `|∇u| ≤ 1`,
/// `|∇u| = 1` μ-a.e.
pub fn mk_residuals(mu: &ScalarField, u: &ScalarField, f: &SourceData) -> Result<ResidualReport> {
    let grid = mu.grid();
    let gsq = node_grad_sq(grid, &grad_values(grid, u.values()));
    let station: Vec<f64> = gsq.iter().map(|g| 1.0 - g).collect();
    residuals(mu, u, f, 0.0, &station)
}

/// Residuals of the optimality system of `E_{λ,δ}`.
pub fn regularized_residuals(
    mu: &Density,
    u: &ScalarField,
    params: &RegParams,
    f: &SourceData,
) -> Result<ResidualReport> {
    let grid = mu.grid();
    let gsq = node_grad_sq(grid, &grad_values(grid, u.values()));
    let station: Vec<f64> = if params.delta > 0.0 {
        let plap = p_laplacian(mu, params.p);
        gsq.iter()
            .zip(plap.values())
            .map(|(g, l)| 1.0 - g - params.delta * params.p * l)
            .collect()
    } else {
        gsq.iter().map(|g| 1.0 - g).collect()
    };
    residuals(mu.field(), u, f, params.lambda, &station)
}

/// Integral of a piecewise-constant source over `(lo, x)`.
fn piecewise_antiderivative(pieces: &[crate::grid::SourcePiece], lo: f64, x: f64) -> f64 {
    pieces
        .iter()
        .map(|p| p.value * (x.min(p.region.hi[0]) - lo.max(p.region.lo[0])).max(0.0))
        .sum()
}

/// The 1D minimizer `μ*(x) = |∫_lo^x f|` of the unregularized problem.
///
/// Piecewise-constant sources with vanishing integral are integrated in
/// closed form; otherwise the sampled field is integrated by the cumulative
/// trapezoid rule.
pub fn oracle_1d(f: &SourceData) -> Result<Density> {
    let grid = f.grid().clone();
    if grid.dim() != 1 {
        return Err(Error::NotOneDimensional);
    }
    let n = grid.len();
    let lo = grid.lo()[0];
    let hi = grid.hi()[0];
    let exact = match f.spec() {
        SourceSpec::PiecewiseConstant(pieces) => {
            let scale: f64 = pieces.iter().map(|p| p.value.abs() * (p.region.hi[0] - p.region.lo[0])).sum();
            let total = piecewise_antiderivative(pieces, lo, hi);
            (total.abs() <= 1e-14 * scale.max(1.0)).then_some(pieces)
        }
        SourceSpec::ClosedForm { .. } => None,
    };
    let mut cumulative = vec![0.0; n];
    match exact {
        Some(pieces) => {
            for (i, x) in grid.coords().enumerate() {
                cumulative[i] = piecewise_antiderivative(pieces, lo, x[0]);
            }
        }
        None => {
            let v = f.field().values();
            let h = grid.h()[0];
            for i in 1..n {
                cumulative[i] = cumulative[i - 1] + 0.5 * h * (v[i - 1] + v[i]);
            }
        }
    }
    let mut values: Vec<f64> = cumulative.into_iter().map(f64::abs).collect();
    values[0] = 0.0;
    values[n - 1] = 0.0;
    Density::from_values(grid, values)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BruteForceOptions {
    pub seed: u64,
    /// Starts launched per round; rounds repeat until agreement or `max_starts`.
    pub batch: usize,
    pub max_starts: usize,
    /// Value agreement required across `required_matches` starts.
    pub agree_tol: f64,
    pub required_matches: usize,
    pub max_iter: usize,
    /// Stop when the projected finite-difference gradient falls below this.
    pub grad_tol: f64,
    pub fd_step: f64,
}

impl Default for BruteForceOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            batch: 8,
            max_starts: 32,
            agree_tol: 1e-9,
            required_matches: 3,
            max_iter: 20_000,
            grad_tol: 1e-9,
            fd_step: 1e-5,
        }
    }
}

pub const BRUTE_FORCE_MAX_NODES: usize = 25;

#[derive(Debug, Clone)]
pub struct BruteForceResult {
    pub density: Density,
    pub value: f64,
    pub starts: usize,
    pub matches: usize,
}

struct Objective<'a> {
    params: &'a RegParams,
    f: &'a SourceData,
    options: SolverOptions,
}

impl Objective<'_> {
    fn value(&self, v: &[f64]) -> Result<f64> {
        let mu = ScalarField::new(self.f.grid().clone(), v.to_vec())?;
        Ok(evaluate_values(&mu, self.params, self.f, &self.options, None)?.energy.total)
    }

    /// Central differences of the extended energy, one-sided where the
    /// stencil would leave the domain `μ + λ > 0`.
    fn fd_gradient(&self, v: &[f64], e0: f64, step: f64) -> Result<Vec<f64>> {
        let grid = self.f.grid();
        let mut g = vec![0.0; v.len()];
        let mut x = v.to_vec();
        for i in grid.interior_nodes() {
            let w = grid.weights()[i];
            let central = v[i] - step + self.params.lambda > 0.5 * self.params.lambda;
            x[i] = v[i] + step;
            let ep = self.value(&x)?;
            g[i] = if central {
                x[i] = v[i] - step;
                let em = self.value(&x)?;
                (ep - em) / (2.0 * step * w)
            } else {
                (ep - e0) / (step * w)
            };
            x[i] = v[i];
        }
        Ok(g)
    }
}

fn projected_norm(grid: &crate::grid::Grid, v: &[f64], g: &[f64]) -> f64 {
    grid.interior_nodes()
        .map(|i| (v[i] - (v[i] - g[i]).max(0.0)).abs())
        .fold(0.0, f64::max)
}

/// Projected Barzilai–Borwein descent with Armijo backtracking from one start.
fn descend(obj: &Objective, start: Vec<f64>, opts: &BruteForceOptions) -> Result<(Vec<f64>, f64)> {
    let grid = obj.f.grid();
    let w = grid.weights();
    let mut x = start;
    let mut fx = obj.value(&x)?;
    let mut g = obj.fd_gradient(&x, fx, opts.fd_step)?;
    let mut step = 1.0;
    for _ in 0..opts.max_iter {
        if projected_norm(grid, &x, &g) <= opts.grad_tol {
            break;
        }
        let mut s = step;
        let accepted = loop {
            let y: Vec<f64> = (0..x.len())
                .map(|i| if grid.is_boundary(i) { 0.0 } else { (x[i] - s * g[i]).max(0.0) })
                .collect();
            let d: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            let dec = weighted_dot(w, &g, &d);
            if dec <= 0.0 {
                break None;
            }
            let fy = obj.value(&y)?;
            if fy <= fx - 1e-4 * dec {
                break Some((y, fy));
            }
            s *= 0.5;
            if s < 1e-16 {
                break None;
            }
        };
        let Some((y, fy)) = accepted else { break };
        let gy = obj.fd_gradient(&y, fy, opts.fd_step)?;
        let dx: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
        let dg: Vec<f64> = gy.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = weighted_dot(w, &dx, &dg);
        step = if sy > 0.0 { (weighted_dot(w, &dx, &dx) / sy).clamp(1e-10, 1e4) } else { (2.0 * s).min(1e4) };
        x = y;
        fx = fy;
        g = gy;
    }
    Ok((x, fx))
}

/// Minimizes `E_{λ,δ}` over the discrete cone from random starts, using only
/// energy values.
pub fn brute_force_minimize(params: &RegParams, f: &SourceData, options: &BruteForceOptions) -> Result<BruteForceResult> {
    let grid = f.grid().clone();
    if grid.len() > BRUTE_FORCE_MAX_NODES {
        return Err(Error::InvalidParams(format!(
            "brute force is limited to {BRUTE_FORCE_MAX_NODES} nodes, grid has {}",
            grid.len()
        )));
    }
    if !(params.delta > 0.0) {
        return Err(Error::InvalidParams("brute force requires delta > 0".into()));
    }
    let obj = Objective { params, f, options: SolverOptions::with_tol(1e-14) };
    let mut results: Vec<(Vec<f64>, f64)> = Vec::new();
    let batch = options.batch.max(options.required_matches);
    while results.len() < options.max_starts {
        let first = results.len();
        let count = batch.min(options.max_starts - first);
        let round: Vec<(Vec<f64>, f64)> = (first..first + count)
            .into_par_iter()
            .map(|k| {
                let mut rng = ChaCha8Rng::seed_from_u64(options.seed.wrapping_add(k as u64));
                let start = (0..grid.len())
                    .map(|i| if grid.is_boundary(i) { 0.0 } else { rng.random_range(0.0..1.5) })
                    .collect();
                descend(&obj, start, options)
            })
            .collect::<Result<_>>()?;
        results.extend(round);
        let best = results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
        let matches = results.iter().filter(|r| r.1 - best <= options.agree_tol).count();
        if matches >= options.required_matches {
            let (x, value) = results.iter().find(|r| r.1 == best).cloned().unwrap();
            return Ok(BruteForceResult {
                density: Density::from_values(grid, x)?,
                value,
                starts: results.len(),
                matches,
            });
        }
    }
    let best = results.iter().map(|r| r.1).fold(f64::INFINITY, f64::min);
    let matches = results.iter().filter(|r| r.1 - best <= options.agree_tol).count();
    Err(Error::NonReproducible { best, matches, starts: results.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::elliptic::solve_weighted_neumann_rhs;
    use crate::grid::{build_grid, make_source, AxisBox, Grid, SourceOptions, SourcePiece};
    use std::sync::Arc;

    fn piece(lo: f64, hi: f64, v: f64) -> SourcePiece {
        SourcePiece { region: AxisBox::new(vec![lo], vec![hi]).unwrap(), value: v }
    }

    fn source(g: &Arc<Grid>, pieces: Vec<SourcePiece>) -> SourceData {
        make_source(g, SourceSpec::PiecewiseConstant(pieces), SourceOptions::default()).unwrap()
    }

    fn dipole(g: &Arc<Grid>) -> SourceData {
        source(g, vec![piece(-1.0, 0.0, 1.0), piece(0.0, 1.0, -1.0)])
    }

    #[test]
    fn oracle_tent_and_plateau() {
        let g = build_grid(1, &[-1.5], &[1.5], &[301]).unwrap();
        let mu = oracle_1d(&dipole(&g)).unwrap();
        for (i, x) in g.coords().enumerate() {
            assert!((mu.values()[i] - (1.0 - x[0].abs()).max(0.0)).abs() < 1e-14);
        }
        assert!((mu.mass() - 1.0).abs() < 1e-14);

        let f = source(&g, vec![piece(-1.0, -0.5, 1.0), piece(0.5, 1.0, -1.0)]);
        let mu = oracle_1d(&f).unwrap();
        assert!((mu.mass() - 0.75).abs() < 1e-13);
        let mid = mu.values()[150];
        assert!((mid - 0.5).abs() < 1e-14);

        let z = source(&g, vec![]);
        assert!(oracle_1d(&z).unwrap().values().iter().all(|v| *v == 0.0));

        let g2 = build_grid(2, &[0.0, 0.0], &[1.0, 1.0], &[5, 5]).unwrap();
        let z2 = make_source(&g2, SourceSpec::PiecewiseConstant(vec![]), SourceOptions::default()).unwrap();
        assert_eq!(oracle_1d(&z2).unwrap_err(), Error::NotOneDimensional);
    }

    #[test]
    fn closed_form_oracle_uses_trapezoid() {
        let g = build_grid(1, &[-2.0], &[2.0], &[401]).unwrap();
        let f = make_source(
            &g,
            SourceSpec::ClosedForm {
                support: AxisBox::new(vec![-1.0], vec![1.0]).unwrap(),
                func: Arc::new(|x: &[f64]| (std::f64::consts::PI * x[0]).sin()),
            },
            SourceOptions::default(),
        )
        .unwrap();
        let mu = oracle_1d(&f).unwrap();
        // ∫_{-1}^x sin(πt) dt = −(cos πx + 1)/π
        for (i, x) in g.coords().enumerate() {
            let e = if x[0].abs() < 1.0 { ((std::f64::consts::PI * x[0]).cos() + 1.0) / std::f64::consts::PI } else { 0.0 };
            assert!((mu.values()[i] - e).abs() < 1e-3);
        }
    }

    #[test]
    fn mk_residuals_of_the_analytic_pair() {
        let g = build_grid(1, &[-1.5], &[1.5], &[61]).unwrap();
        let f = dipole(&g);
        let mu = oracle_1d(&f).unwrap();
        let u = ScalarField::from_fn(g.clone(), |x| -x[0]);
        let r = mk_residuals(mu.field(), &u, &f).unwrap();
        assert!(r.pde_residual < 1e-12, "{r:?}");
        assert!(r.eikonal_excess < 1e-12 && r.stationarity < 1e-12 && r.complementarity < 1e-12);

        let r = mk_residuals(&ScalarField::constant(g.clone(), 1.0), &ScalarField::zeros(g.clone()), &f).unwrap();
        assert!((r.pde_residual - 1.0).abs() < 1e-12);

        let z = source(&g, vec![]);
        let zero = ScalarField::zeros(g.clone());
        let r = mk_residuals(&zero, &zero, &z).unwrap();
        assert_eq!(r, ResidualReport { pde_residual: 0.0, eikonal_excess: 0.0, stationarity: 0.0, complementarity: 0.0 });
    }

    #[test]
    fn oracle_residuals_vanish_with_tiny_lambda() {
        // at λ = 1e−8 the residuals sit at the λ/h level on every grid
        for n in [31, 61, 121] {
            let g = build_grid(1, &[-1.5], &[1.5], &[n]).unwrap();
            let f = dipole(&g);
            let mu = oracle_1d(&f).unwrap();
            let (u, _) = solve_weighted_neumann_rhs(mu.field(), 1e-8, f.field(), &SolverOptions::default(), None).unwrap();
            let r = mk_residuals(mu.field(), u.field(), &f).unwrap();
            let worst = r.pde_residual.max(r.stationarity).max(r.complementarity);
            assert!(worst < 1e-5, "{n}: {r:?}");
            assert_eq!(r.eikonal_excess, 0.0);
        }
    }

    #[test]
    fn brute_force_zero_source() {
        let g = build_grid(1, &[-1.5], &[1.5], &[9]).unwrap();
        let f = source(&g, vec![]);
        let p = RegParams::new(1e-2, 1e-3, 2.0).unwrap();
        let r = brute_force_minimize(&p, &f, &BruteForceOptions::default()).unwrap();
        assert!(r.density.values().iter().all(|v| *v == 0.0));
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn brute_force_limits() {
        let g = build_grid(1, &[-1.5], &[1.5], &[31]).unwrap();
        let f = dipole(&g);
        let p = RegParams::new(1e-2, 1e-3, 2.0).unwrap();
        assert!(brute_force_minimize(&p, &f, &BruteForceOptions::default()).is_err());
    }

    #[test]
    fn brute_force_near_oracle_on_a_tiny_grid() {
        let g = build_grid(1, &[-1.5], &[1.5], &[13]).unwrap();
        let f = dipole(&g);
        let p = RegParams::new(1e-3, 1e-6, 2.0).unwrap();
        let r = brute_force_minimize(&p, &f, &BruteForceOptions::default()).unwrap();
        let oracle = oracle_1d(&f).unwrap();
        let d = r.density.field().linf_distance(oracle.field()).unwrap();
        assert!(d < 1e-2, "{d}");
        assert!(r.matches >= 3);
    }
}
