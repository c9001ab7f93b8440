//! The regularized transport energy
//!
//! ```text
//! E_{λ,δ}(μ) = L_λ(μ) + ∫μ + δ‖∇μ‖_p^p,   L_λ(μ) = ∫(μ+λ)|∇u_μ|²,
//! ```
//!
//! its L²-gradient `1 − |∇u_μ|² − δpΔ_pμ` and the least-norm subgradient
//! over the cone of nonnegative densities with zero trace.
//!
//! Every quantity is the exact derivative of the discrete energy: the
//! Dirichlet term differentiates through arithmetic-mean edge conductivities
//! (envelope theorem at the discrete state), and the p-Laplacian is the
//! weighted gradient of the discrete Sobolev term.

use std::sync::Arc;

use crate::elliptic::{
    solve_weighted_neumann_rhs, Potential, RegParams, SolveReport, SolverOptions,
};
use crate::error::{Error, Result};
use crate::grid::{grad_values, node_grad_sq, Grid, ScalarField, SourceData};

/// Relative default for the `{μ > 0}` selector.
pub const DEFAULT_SUPPORT_REL: f64 = 1e-10;

/// A nonnegative nodal density vanishing on the outer boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Density {
    field: ScalarField,
    support_threshold: f64,
}

impl Density {
    pub fn new(field: ScalarField) -> Result<Self> {
        let grid = field.grid().clone();
        for (i, v) in field.values().iter().enumerate() {
            if *v < 0.0 {
                return Err(Error::InvalidDensity(format!("negative value {v} at node {i}")));
            }
            if grid.is_boundary(i) && *v != 0.0 {
                return Err(Error::InvalidDensity(format!("nonzero boundary value {v} at node {i}")));
            }
        }
        let support_threshold = DEFAULT_SUPPORT_REL * field.max_abs();
        Ok(Self { field, support_threshold })
    }

    pub fn from_values(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        Self::new(ScalarField::new(grid, values)?)
    }

    /// Projects arbitrary values onto the admissible cone: negative parts
    /// and boundary values are set to zero.
    pub fn clamped(grid: Arc<Grid>, mut values: Vec<f64>) -> Result<Self> {
        for (i, v) in values.iter_mut().enumerate() {
            if grid.is_boundary(i) || *v < 0.0 {
                *v = 0.0;
            }
        }
        Self::from_values(grid, values)
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        Self { field: ScalarField::zeros(grid), support_threshold: 0.0 }
    }

    /// `value` on interior nodes, zero on the boundary.
    pub fn constant_interior(grid: Arc<Grid>, value: f64) -> Result<Self> {
        let values = (0..grid.len())
            .map(|i| if grid.is_boundary(i) { 0.0 } else { value })
            .collect();
        Self::from_values(grid, values)
    }

    pub fn with_support_threshold(mut self, eps: f64) -> Self {
        self.support_threshold = eps;
        self
    }

    pub fn field(&self) -> &ScalarField {
        &self.field
    }
    pub fn values(&self) -> &[f64] {
        self.field.values()
    }
    pub fn grid(&self) -> &Arc<Grid> {
        self.field.grid()
    }
    pub fn support_threshold(&self) -> f64 {
        self.support_threshold
    }
    pub fn in_support(&self, i: usize) -> bool {
        self.field.values()[i] > self.support_threshold
    }
    pub fn mass(&self) -> f64 {
        crate::grid::integrate(&self.field)
    }
}

/// Terms of `E_{λ,δ}`; `total` is always `(l + mass) + sobolev`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EnergyBreakdown {
    pub l: f64,
    pub mass: f64,
    pub sobolev: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    fn new(l: f64, mass: f64, sobolev: f64) -> Self {
        Self { l, mass, sobolev, total: l + mass + sobolev }
    }
}

/// Discrete `‖∇μ‖_p^p`, summed over cells. In 2D the squared gradient of a
/// cell averages the squared differences of its two parallel edge pairs.
pub fn sobolev_seminorm(mu: &ScalarField, p: f64) -> f64 {
    sobolev_values(mu.grid(), mu.values(), p)
}

fn cell_grad_sq(cell: &crate::grid::Cell, g: &[f64]) -> f64 {
    cell.coef * cell.edge_ids().iter().map(|&e| g[e] * g[e]).sum::<f64>()
}

fn sobolev_values(grid: &Grid, mu: &[f64], p: f64) -> f64 {
    let g = grad_values(grid, mu);
    grid.cells()
        .iter()
        .map(|c| c.area * cell_grad_sq(c, &g).powf(0.5 * p))
        .sum()
}

fn p_laplacian_values(grid: &Grid, mu: &[f64], p: f64) -> Vec<f64> {
    let g = grad_values(grid, mu);
    let mut ds = vec![0.0; grid.len()];
    for c in grid.cells() {
        let s = cell_grad_sq(c, &g);
        let factor = if s > 0.0 { s.powf(0.5 * p - 1.0) } else { 0.0 };
        if factor == 0.0 {
            continue;
        }
        let scale = c.area * p * c.coef * factor;
        for &ei in c.edge_ids() {
            let e = &grid.edges()[ei];
            let d = scale * g[ei] / grid.h()[e.axis];
            ds[e.head] += d;
            ds[e.tail] -= d;
        }
    }
    // Δ_pμ = −(1/(p w)) ∂S/∂μ on interior nodes
    (0..grid.len())
        .map(|i| {
            if grid.is_boundary(i) {
                0.0
            } else {
                -ds[i] / (p * grid.weights()[i])
            }
        })
        .collect()
}

/// `div(|∇μ|^{p−2}∇μ)` at interior nodes, zero on the boundary.
pub fn p_laplacian(mu: &Density, p: f64) -> ScalarField {
    let values = p_laplacian_values(mu.grid(), mu.values(), p);
    ScalarField::from_vec_unchecked(mu.grid().clone(), values)
}

/// One state evaluation: the elliptic solve and everything derived from it.
#[derive(Debug, Clone)]
pub struct StateEval {
    pub energy: EnergyBreakdown,
    pub u: Potential,
    /// Nodal `|∇u_μ|²`.
    pub grad_sq: Vec<f64>,
    pub report: SolveReport,
}

/// Evaluates `E_{λ,δ}` at nodal values that only need `μ + λ > 0`; this is
/// the extension of the energy off the cone on which it is differentiable.
pub fn evaluate_values(
    mu: &ScalarField,
    params: &RegParams,
    f: &SourceData,
    options: &SolverOptions,
    guess: Option<&[f64]>,
) -> Result<StateEval> {
    mu.check_grid(f.field())?;
    params.check_dim(mu.grid().dim())?;
    let grid = mu.grid();
    let (u, report) = solve_weighted_neumann_rhs(mu, params.lambda, f.field(), options, guess)?;
    let g = grad_values(grid, u.values());
    let grad_sq = node_grad_sq(grid, &g);
    let mass = crate::grid::integrate(mu);
    let sobolev = if params.delta > 0.0 {
        params.delta * sobolev_values(grid, mu.values(), params.p)
    } else {
        0.0
    };
    // L = 2∫fu − ∫(μ+λ)|∇u|²
    let l = 2.0 * crate::grid::weighted_dot(grid.weights(), f.field().values(), u.values()) - report.dirichlet_energy;
    Ok(StateEval { energy: EnergyBreakdown::new(l, mass, sobolev), u, grad_sq, report })
}

pub fn evaluate(
    mu: &Density,
    params: &RegParams,
    f: &SourceData,
    options: &SolverOptions,
    guess: Option<&[f64]>,
) -> Result<StateEval> {
    evaluate_values(mu.field(), params, f, options, guess)
}

pub fn eval_energy(mu: &Density, params: &RegParams, f: &SourceData) -> Result<EnergyBreakdown> {
    eval_energy_with(mu, params, f, &SolverOptions::default())
}

pub fn eval_energy_with(
    mu: &Density,
    params: &RegParams,
    f: &SourceData,
    options: &SolverOptions,
) -> Result<EnergyBreakdown> {
    evaluate(mu, params, f, options, None).map(|s| s.energy)
}

pub(crate) fn gradient_from(grid: &Grid, mu: &[f64], params: &RegParams, grad_sq: &[f64]) -> Vec<f64> {
    let plap = if params.delta > 0.0 {
        p_laplacian_values(grid, mu, params.p)
    } else {
        vec![0.0; grid.len()]
    };
    (0..grid.len())
        .map(|i| {
            if grid.is_boundary(i) {
                0.0
            } else {
                1.0 - grad_sq[i] - params.delta * params.p * plap[i]
            }
        })
        .collect()
}

pub(crate) fn min_subgradient_from(mu: &Density, params: &RegParams, grad_sq: &[f64]) -> Vec<f64> {
    let grid = mu.grid();
    let grad = gradient_from(grid, mu.values(), params, grad_sq);
    (0..grid.len())
        .map(|i| {
            if grid.is_boundary(i) {
                0.0
            } else if mu.in_support(i) {
                grad[i]
            } else {
                // −(1 − |∇u|²)⁻
                (1.0 - grad_sq[i]).min(0.0)
            }
        })
        .collect()
}

/// L²-gradient `1 − |∇u_μ|² − δpΔ_pμ` on interior nodes.
pub fn grad_energy(mu: &Density, params: &RegParams, f: &SourceData) -> Result<ScalarField> {
    let s = evaluate(mu, params, f, &SolverOptions::default(), None)?;
    let values = gradient_from(mu.grid(), mu.values(), params, &s.grad_sq);
    Ok(ScalarField::from_vec_unchecked(mu.grid().clone(), values))
}

/// Least-norm element of the subdifferential: the gradient on `{μ > ε}`
/// and `−(1 − |∇u_μ|²)⁻` on `{μ ≤ ε}`.
pub fn minimal_subgradient(mu: &Density, params: &RegParams, f: &SourceData) -> Result<ScalarField> {
    let s = evaluate(mu, params, f, &SolverOptions::default(), None)?;
    let values = min_subgradient_from(mu, params, &s.grad_sq);
    Ok(ScalarField::from_vec_unchecked(mu.grid().clone(), values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, make_source, AxisBox, SourceOptions, SourcePiece, SourceSpec};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dipole(grid: &Arc<Grid>) -> SourceData {
        let piece = |lo: f64, hi: f64, v: f64| SourcePiece { region: AxisBox::new(vec![lo], vec![hi]).unwrap(), value: v };
        make_source(
            grid,
            SourceSpec::PiecewiseConstant(vec![piece(-1.0, 0.0, 1.0), piece(0.0, 1.0, -1.0)]),
            SourceOptions::default(),
        )
        .unwrap()
    }

    fn zero_source(grid: &Arc<Grid>) -> SourceData {
        make_source(grid, SourceSpec::PiecewiseConstant(vec![]), SourceOptions::default()).unwrap()
    }

    fn tent(grid: &Arc<Grid>) -> Density {
        Density::from_values(grid.clone(), grid.coords().map(|x| (1.0 - x[0].abs()).max(0.0)).collect()).unwrap()
    }

    #[test]
    fn density_invariants() {
        let g = build_grid(1, &[0.0], &[1.0], &[5]).unwrap();
        assert!(Density::from_values(g.clone(), vec![0.0, 1.0, -0.1, 1.0, 0.0]).is_err());
        assert!(Density::from_values(g.clone(), vec![0.1, 1.0, 1.0, 1.0, 0.0]).is_err());
        let d = Density::clamped(g.clone(), vec![0.3, 1.0, -0.1, 2.0, 0.4]).unwrap();
        assert_eq!(d.values(), &[0.0, 1.0, 0.0, 2.0, 0.0]);
        assert!((d.support_threshold() - 2e-10).abs() < 1e-25);
        assert!(d.in_support(1) && !d.in_support(2));
    }

    #[test]
    fn zero_source_energy_is_mass_plus_sobolev() {
        let g = build_grid(1, &[-1.5], &[1.5], &[31]).unwrap();
        let mu = Density::constant_interior(g.clone(), 0.5).unwrap();
        let p = RegParams::new(1e-2, 1e-3, 2.0).unwrap();
        let e = eval_energy(&mu, &p, &zero_source(&g)).unwrap();
        assert_eq!(e.l, 0.0);
        assert_eq!(e.total, e.mass + e.sobolev);
        assert!(e.sobolev > 0.0);
    }

    #[test]
    fn tent_oracle_balances_mass_and_energy() {
        let g = build_grid(1, &[-1.5], &[1.5], &[301]).unwrap();
        let f = dipole(&g);
        let p = RegParams::new(1e-6, 0.0, 2.0).unwrap();
        let e = eval_energy(&tent(&g), &p, &f).unwrap();
        assert!((e.mass - 1.0).abs() < 1e-12);
        assert!((e.l - 1.0).abs() < 1e-3, "{}", e.l);
        assert!((e.total - 2.0).abs() < 1e-3);
    }

    #[test]
    fn scaling_law_of_dual_term() {
        let g = build_grid(1, &[-1.5], &[1.5], &[101]).unwrap();
        let f = dipole(&g);
        let p = RegParams::new(1e-9, 0.0, 2.0).unwrap();
        let mu = Density::from_values(g.clone(), g.coords().map(|x| (1.2 - x[0] * x[0]).max(0.0) * (2.25 - x[0] * x[0])).collect()).unwrap();
        let base = eval_energy_with(&mu, &p, &f, &SolverOptions::with_tol(1e-13)).unwrap();
        for t in [0.5, 2.0, 4.0] {
            let scaled = Density::new(mu.field().scaled(t)).unwrap();
            let e = eval_energy_with(&scaled, &p, &f, &SolverOptions::with_tol(1e-13)).unwrap();
            assert!((e.l * t - base.l).abs() <= 1e-6 * base.l);
            assert!((e.mass - t * base.mass).abs() <= 1e-12);
            let predicted = base.l / t + t * base.mass;
            assert!((e.total - predicted).abs() <= 1e-6 * predicted);
        }
    }

    #[test]
    fn p_laplacian_examples() {
        let g = build_grid(1, &[-1.0], &[1.0], &[81]).unwrap();
        let para = Density::from_values(g.clone(), g.coords().map(|x| 1.0 - x[0] * x[0]).collect()).unwrap();
        let l2 = p_laplacian(&para, 2.0);
        for i in g.interior_nodes() {
            assert!((l2.values()[i] + 2.0).abs() < 1e-9);
        }
        let l3 = p_laplacian(&para, 3.0);
        let h = g.h()[0];
        for i in g.interior_nodes() {
            let x = g.coord(i)[0];
            assert!((l3.values()[i] + 8.0 * x.abs()).abs() <= 4.0 * h + 1e-9, "x={x}");
        }
        assert_eq!(l2.values()[0], 0.0);

        // linear patch: zero p-Laplacian strictly inside it
        let lin = Density::from_values(
            g.clone(),
            g.coords().map(|x| if x[0].abs() < 0.99 { 0.5 + 0.3 * x[0] } else { 0.0 }).collect(),
        )
        .unwrap();
        let l = p_laplacian(&lin, 3.0);
        for i in g.interior_nodes() {
            if g.coord(i)[0].abs() < 0.9 {
                assert!(l.values()[i].abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gradient_is_one_without_source() {
        let g = build_grid(1, &[-1.5], &[1.5], &[41]).unwrap();
        let mu = Density::from_values(g.clone(), g.coords().map(|x| 0.5 * (1.0 - x[0] * x[0]).max(0.0)).collect()).unwrap();
        let p = RegParams::new(1e-3, 0.0, 2.0).unwrap();
        let gr = grad_energy(&mu, &p, &zero_source(&g)).unwrap();
        for i in g.interior_nodes() {
            assert_eq!(gr.values()[i], 1.0);
        }
    }

    fn fd_check(grid: &Arc<Grid>, f: &SourceData, params: &RegParams, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let opts = SolverOptions::with_tol(1e-14);
        for _ in 0..5 {
            let mu = Density::clamped(
                grid.clone(),
                (0..grid.len()).map(|_| rng.random_range(0.2..1.5)).collect(),
            )
            .unwrap();
            let dir: Vec<f64> = (0..grid.len())
                .map(|i| if grid.is_boundary(i) { 0.0 } else { rng.random_range(-1.0..1.0) })
                .collect();
            let dir = ScalarField::new(grid.clone(), dir).unwrap();
            let s = evaluate(&mu, params, f, &opts, None).unwrap();
            let gvals = gradient_from(grid, mu.values(), params, &s.grad_sq);
            let analytic = ScalarField::new(grid.clone(), gvals).unwrap().inner(&dir).unwrap();
            let eps = 1e-5;
            let plus = evaluate_values(&mu.field().axpy(eps, &dir).unwrap(), params, f, &opts, None).unwrap();
            let minus = evaluate_values(&mu.field().axpy(-eps, &dir).unwrap(), params, f, &opts, None).unwrap();
            let fd = (plus.energy.total - minus.energy.total) / (2.0 * eps);
            let rel = (fd - analytic).abs() / analytic.abs().max(1e-12);
            assert!(rel < 1e-5, "fd {fd} analytic {analytic}");
        }
    }

    #[test]
    fn gradient_matches_finite_differences_1d() {
        let g = build_grid(1, &[-1.5], &[1.5], &[11]).unwrap();
        let f = make_source(
            &g,
            SourceSpec::PiecewiseConstant(vec![
                SourcePiece { region: AxisBox::new(vec![-1.0], vec![0.0]).unwrap(), value: 1.0 },
                SourcePiece { region: AxisBox::new(vec![0.0], vec![1.0]).unwrap(), value: -1.0 },
            ]),
            SourceOptions::default(),
        )
        .unwrap();
        fd_check(&g, &f, &RegParams::new(1e-2, 1e-2, 2.0).unwrap(), 1);
        fd_check(&g, &f, &RegParams::new(1e-2, 1e-2, 3.5).unwrap(), 2);
    }

    #[test]
    fn gradient_matches_finite_differences_2d() {
        let g = build_grid(2, &[-1.5, -1.5], &[1.5, 1.5], &[9, 8]).unwrap();
        let f = make_source(
            &g,
            SourceSpec::PiecewiseConstant(vec![
                SourcePiece { region: AxisBox::new(vec![-1.0, -1.0], vec![-0.2, 1.0]).unwrap(), value: 1.0 },
                SourcePiece { region: AxisBox::new(vec![0.2, -1.0], vec![1.0, 1.0]).unwrap(), value: -1.0 },
            ]),
            SourceOptions::default(),
        )
        .unwrap();
        fd_check(&g, &f, &RegParams::new(1e-2, 1e-2, 3.0).unwrap(), 3);
        fd_check(&g, &f, &RegParams::new(1e-1, 0.0, 2.5).unwrap(), 4);
    }

    #[test]
    fn minimal_subgradient_cases() {
        let g = build_grid(1, &[-1.5], &[1.5], &[61]).unwrap();
        let f = dipole(&g);
        let p = RegParams::new(1e-3, 0.0, 2.0).unwrap();

        let positive = Density::constant_interior(g.clone(), 0.5).unwrap();
        let xi = minimal_subgradient(&positive, &p, &f).unwrap();
        let gr = grad_energy(&positive, &p, &f).unwrap();
        assert_eq!(xi, gr);

        // hole inside the support: |∇u| > 1 there, so ξ* < 0 and the flow adds mass
        let holed = Density::from_values(
            g.clone(),
            tent(&g).values().iter().zip(g.coords()).map(|(v, x)| if (x[0] + 0.5).abs() < 0.2 { 0.0 } else { *v }).collect(),
        )
        .unwrap();
        let s = evaluate(&holed, &p, &f, &SolverOptions::default(), None).unwrap();
        let xi = minimal_subgradient(&holed, &p, &f).unwrap();
        for i in g.interior_nodes() {
            if !holed.in_support(i) {
                if s.grad_sq[i] > 1.0 {
                    assert!(xi.values()[i] < 0.0);
                    assert_eq!(xi.values()[i], 1.0 - s.grad_sq[i]);
                } else {
                    assert_eq!(xi.values()[i], 0.0);
                }
            }
        }
        let x_hole = g.coords().position(|x| (x[0] + 0.5).abs() < 1e-9).unwrap();
        assert!(xi.values()[x_hole] < 0.0);
        // outside supp f the potential is flat: ξ* = 0 on the empty region
        assert_eq!(xi.values()[2], 0.0);
    }

    fn random_density(grid: &Arc<Grid>, rng: &mut ChaCha8Rng) -> Density {
        Density::clamped(grid.clone(), (0..grid.len()).map(|_| rng.random_range(0.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn convex_along_segments() {
        let g = build_grid(1, &[-1.5], &[1.5], &[21]).unwrap();
        let f = dipole(&g);
        let p = RegParams::new(1e-2, 1e-3, 2.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let a = random_density(&g, &mut rng);
            let b = random_density(&g, &mut rng);
            let t = rng.random_range(0.05..0.95);
            let mid = Density::new(a.field().scaled(1.0 - t).axpy(t, b.field()).unwrap()).unwrap();
            let ea = eval_energy(&a, &p, &f).unwrap().total;
            let eb = eval_energy(&b, &p, &f).unwrap().total;
            let em = eval_energy(&mid, &p, &f).unwrap().total;
            assert!(em <= (1.0 - t) * ea + t * eb + 1e-9);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn energy_decreasing_in_delta(vals in proptest::collection::vec(0.0f64..2.0, 19), d0 in 1e-4f64..1.0, frac in 0.0f64..1.0) {
            let g = build_grid(1, &[-1.5], &[1.5], &[21]).unwrap();
            let f = dipole(&g);
            let mut v = vec![0.0];
            v.extend(vals);
            v.push(0.0);
            let mu = Density::from_values(g.clone(), v).unwrap();
            let hi = eval_energy(&mu, &RegParams::new(1e-2, d0, 2.0).unwrap(), &f).unwrap();
            let lo = eval_energy(&mu, &RegParams::new(1e-2, d0 * frac, 2.0).unwrap(), &f).unwrap();
            prop_assert!(hi.total >= lo.total);
        }

        #[test]
        fn dual_term_monotone_in_density(vals in proptest::collection::vec(0.0f64..2.0, 19), bumps in proptest::collection::vec(0.0f64..1.0, 19)) {
            let g = build_grid(1, &[-1.5], &[1.5], &[21]).unwrap();
            let f = dipole(&g);
            let p = RegParams::new(1e-2, 0.0, 2.0).unwrap();
            let to_density = |inner: Vec<f64>| {
                let mut v = vec![0.0];
                v.extend(inner);
                v.push(0.0);
                Density::from_values(g.clone(), v).unwrap()
            };
            let larger: Vec<f64> = vals.iter().zip(&bumps).map(|(a, b)| a + b).collect();
            let l1 = eval_energy(&to_density(vals), &p, &f).unwrap().l;
            let l2 = eval_energy(&to_density(larger), &p, &f).unwrap().l;
            prop_assert!(l1 >= l2 - 1e-12 * l1.abs());
        }
    }
}
