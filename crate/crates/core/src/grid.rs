//! Uniform node-centred tensor grids on boxes in one or two dimensions.
//!
//! Scalar fields live on nodes. Gradients live on edge midpoints, one
//! component per edge (the axis the edge is aligned with), and the discrete
//! divergence is defined as the exact negative adjoint of the gradient with
//! respect to the trapezoid-weighted inner products. No flux ever crosses the
//! outer boundary, which is the homogeneous Neumann closure.

use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// An axis-aligned box `[lo, hi]` in `dim` dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct AxisBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl AxisBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidSource("box corners have mismatched dimension".into()));
        }
        if lo.iter().chain(&hi).any(|v| !v.is_finite()) {
            return Err(Error::InvalidSource("box corners must be finite".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| a >= b) {
            return Err(Error::InvalidSource("box must satisfy lo < hi on every axis".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (a, b))| *v >= *a && *v <= *b)
    }

    /// Euclidean diameter.
    pub fn diameter(&self) -> f64 {
        self.lo
            .iter()
            .zip(&self.hi)
            .map(|(a, b)| (b - a).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn hull(&self, other: &AxisBox) -> AxisBox {
        AxisBox {
            lo: self.lo.iter().zip(&other.lo).map(|(a, b)| a.min(*b)).collect(),
            hi: self.hi.iter().zip(&other.hi).map(|(a, b)| a.max(*b)).collect(),
        }
    }
}

/// An edge joining `tail` to `head = tail + stride(axis)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub tail: usize,
    pub head: usize,
    pub axis: usize,
    /// Quadrature weight: midpoint rule along `axis`, trapezoid on the others.
    pub weight: f64,
}

/// A grid cell. In 1D a cell is a single edge; in 2D it is the square with
/// two x-edges (bottom, top) and two y-edges (left, right).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub edges: [usize; 4],
    pub count: usize,
    /// Averaging coefficient applied to each squared edge component.
    pub coef: f64,
    pub area: f64,
}

impl Cell {
    pub fn edge_ids(&self) -> &[usize] {
        &self.edges[..self.count]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    lo: Vec<f64>,
    hi: Vec<f64>,
    n: Vec<usize>,
    h: Vec<f64>,
    boundary: Vec<bool>,
    weights: Vec<f64>,
    edges: Vec<Edge>,
    cells: Vec<Cell>,
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "dim={}", self.dim)?;
        for a in 0..self.dim {
            write!(f, ",lo{a}={},hi{a}={},n{a}={}", self.lo[a], self.hi[a], self.n[a])?;
        }
        Ok(())
    }
}

/// Builds a uniform grid with `n_nodes[a]` nodes on `[lo[a], hi[a]]`.
pub fn build_grid(dim: usize, lo: &[f64], hi: &[f64], n_nodes: &[usize]) -> Result<Arc<Grid>> {
    Grid::new(dim, lo, hi, n_nodes).map(Arc::new)
}

impl Grid {
    pub fn new(dim: usize, lo: &[f64], hi: &[f64], n_nodes: &[usize]) -> Result<Self> {
        if !(1..=2).contains(&dim) {
            return Err(Error::InvalidGrid(format!("dimension {dim} not supported (1 or 2)")));
        }
        if lo.len() != dim || hi.len() != dim || n_nodes.len() != dim {
            return Err(Error::InvalidGrid("extents and node counts must have length dim".into()));
        }
        if lo.iter().chain(hi).any(|v| !v.is_finite()) {
            return Err(Error::InvalidGrid("extents must be finite".into()));
        }
        for a in 0..dim {
            if hi[a] <= lo[a] {
                return Err(Error::InvalidGrid(format!("axis {a}: hi must exceed lo")));
            }
            if n_nodes[a] < 3 {
                return Err(Error::InvalidGrid(format!("axis {a}: need at least 3 nodes")));
            }
        }
        let h: Vec<f64> = (0..dim)
            .map(|a| (hi[a] - lo[a]) / (n_nodes[a] - 1) as f64)
            .collect();
        let mut grid = Grid {
            dim,
            lo: lo.to_vec(),
            hi: hi.to_vec(),
            n: n_nodes.to_vec(),
            h,
            boundary: Vec::new(),
            weights: Vec::new(),
            edges: Vec::new(),
            cells: Vec::new(),
        };
        grid.assemble();
        Ok(grid)
    }

    fn assemble(&mut self) {
        let total = self.n.iter().product::<usize>();
        let mut boundary = Vec::with_capacity(total);
        let mut weights = Vec::with_capacity(total);
        for idx in 0..total {
            let ijk = self.multi_index(idx);
            let mut on_boundary = false;
            let mut w = 1.0;
            for a in 0..self.dim {
                let end = ijk[a] == 0 || ijk[a] == self.n[a] - 1;
                on_boundary |= end;
                w *= if end { 0.5 * self.h[a] } else { self.h[a] };
            }
            boundary.push(on_boundary);
            weights.push(w);
        }

        let mut edges = Vec::new();
        // edge_at[axis][tail] for cell assembly
        let mut edge_at = vec![vec![usize::MAX; total]; self.dim];
        for a in 0..self.dim {
            let stride = self.stride(a);
            for tail in 0..total {
                let ijk = self.multi_index(tail);
                if ijk[a] + 1 >= self.n[a] {
                    continue;
                }
                let mut w = self.h[a];
                for b in 0..self.dim {
                    if b != a {
                        let end = ijk[b] == 0 || ijk[b] == self.n[b] - 1;
                        w *= if end { 0.5 * self.h[b] } else { self.h[b] };
                    }
                }
                edge_at[a][tail] = edges.len();
                edges.push(Edge { tail, head: tail + stride, axis: a, weight: w });
            }
        }

        let mut cells = Vec::new();
        match self.dim {
            1 => {
                for (e, edge) in edges.iter().enumerate() {
                    cells.push(Cell { edges: [e, 0, 0, 0], count: 1, coef: 1.0, area: edge.weight });
                }
            }
            _ => {
                let nx = self.n[0];
                let area = self.h[0] * self.h[1];
                for j in 0..self.n[1] - 1 {
                    for i in 0..nx - 1 {
                        let sw = i + nx * j;
                        let bottom = edge_at[0][sw];
                        let top = edge_at[0][sw + nx];
                        let left = edge_at[1][sw];
                        let right = edge_at[1][sw + 1];
                        cells.push(Cell { edges: [bottom, top, left, right], count: 4, coef: 0.5, area });
                    }
                }
            }
        }

        self.boundary = boundary;
        self.weights = weights;
        self.edges = edges;
        self.cells = cells;
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn lo(&self) -> &[f64] {
        &self.lo
    }
    pub fn hi(&self) -> &[f64] {
        &self.hi
    }
    pub fn n_nodes(&self) -> &[usize] {
        &self.n
    }
    pub fn h(&self) -> &[f64] {
        &self.h
    }
    pub fn len(&self) -> usize {
        self.weights.len()
    }
    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
    pub fn boundary_mask(&self) -> &[bool] {
        &self.boundary
    }
    pub fn is_boundary(&self, idx: usize) -> bool {
        self.boundary[idx]
    }
    /// Trapezoid weight (dual-cell volume) of every node.
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }
    pub fn cells(&self) -> &[Cell] {
        &self.cells
    }

    pub fn volume(&self) -> f64 {
        self.lo.iter().zip(&self.hi).map(|(a, b)| b - a).product()
    }

    pub fn domain(&self) -> AxisBox {
        AxisBox { lo: self.lo.clone(), hi: self.hi.clone() }
    }

    pub fn stride(&self, axis: usize) -> usize {
        if axis == 0 {
            1
        } else {
            self.n[0]
        }
    }

    pub fn multi_index(&self, idx: usize) -> [usize; 2] {
        if self.dim == 1 {
            [idx, 0]
        } else {
            [idx % self.n[0], idx / self.n[0]]
        }
    }

    pub fn coord(&self, idx: usize) -> [f64; 2] {
        let ijk = self.multi_index(idx);
        let mut x = [0.0; 2];
        for a in 0..self.dim {
            // hit hi exactly at the last node
            x[a] = if ijk[a] == self.n[a] - 1 {
                self.hi[a]
            } else {
                self.lo[a] + ijk[a] as f64 * self.h[a]
            };
        }
        x
    }

    pub fn coords(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        (0..self.len()).map(|i| self.coord(i))
    }

    pub fn interior_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| !self.boundary[i])
    }
}

/// Real values on the nodes of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl ScalarField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(Error::GridMismatch);
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDensity("field values must be finite".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn zeros(grid: Arc<Grid>) -> Self {
        let n = grid.len();
        Self { grid, values: vec![0.0; n] }
    }

    pub fn constant(grid: Arc<Grid>, value: f64) -> Self {
        let n = grid.len();
        Self { grid, values: vec![value; n] }
    }

    pub fn from_fn(grid: Arc<Grid>, mut f: impl FnMut([f64; 2]) -> f64) -> Self {
        let values = grid.coords().map(&mut f).collect();
        Self { grid, values }
    }

    pub(crate) fn from_vec_unchecked(grid: Arc<Grid>, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), grid.len());
        Self { grid, values }
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn same_grid(&self, other: &ScalarField) -> bool {
        Arc::ptr_eq(&self.grid, &other.grid) || *self.grid == *other.grid
    }

    pub fn check_grid(&self, other: &ScalarField) -> Result<()> {
        if self.same_grid(other) {
            Ok(())
        } else {
            Err(Error::GridMismatch)
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn scaled(&self, c: f64) -> ScalarField {
        Self::from_vec_unchecked(self.grid.clone(), self.values.iter().map(|v| c * v).collect())
    }

    /// `self + c * other`.
    pub fn axpy(&self, c: f64, other: &ScalarField) -> Result<ScalarField> {
        self.check_grid(other)?;
        let values = self.values.iter().zip(&other.values).map(|(a, b)| a + c * b).collect();
        ScalarField::new(self.grid.clone(), values)
    }

    /// Weighted (trapezoid) inner product.
    pub fn inner(&self, other: &ScalarField) -> Result<f64> {
        self.check_grid(other)?;
        Ok(weighted_dot(self.grid.weights(), &self.values, &other.values))
    }

    pub fn l2_norm(&self) -> f64 {
        weighted_dot(self.grid.weights(), &self.values, &self.values).sqrt()
    }

    pub fn linf_distance(&self, other: &ScalarField) -> Result<f64> {
        self.check_grid(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn l2_distance(&self, other: &ScalarField) -> Result<f64> {
        self.check_grid(other)?;
        let w = self.grid.weights();
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .zip(w)
            .map(|((a, b), w)| w * (a - b) * (a - b))
            .sum::<f64>()
            .sqrt())
    }
}

pub(crate) fn weighted_dot(w: &[f64], a: &[f64], b: &[f64]) -> f64 {
    w.iter().zip(a).zip(b).map(|((w, a), b)| w * a * b).sum()
}

/// One real value per edge midpoint: the component of a vector field along
/// the edge's axis.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeField {
    grid: Arc<Grid>,
    values: Vec<f64>,
}

impl EdgeField {
    pub fn new(grid: Arc<Grid>, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.edges().len() {
            return Err(Error::GridMismatch);
        }
        Ok(Self { grid, values })
    }

    pub fn grid(&self) -> &Arc<Grid> {
        &self.grid
    }
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Edge-weighted inner product, the discrete `∫ v·w`.
    pub fn inner(&self, other: &EdgeField) -> Result<f64> {
        if *self.grid != *other.grid {
            return Err(Error::GridMismatch);
        }
        Ok(self
            .grid
            .edges()
            .iter()
            .zip(self.values.iter().zip(&other.values))
            .map(|(e, (a, b))| e.weight * a * b)
            .sum())
    }
}

pub(crate) fn grad_values(grid: &Grid, u: &[f64]) -> Vec<f64> {
    grid.edges()
        .iter()
        .map(|e| (u[e.head] - u[e.tail]) / grid.h()[e.axis])
        .collect()
}

pub(crate) fn div_values(grid: &Grid, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for (e, ve) in grid.edges().iter().zip(v) {
        let flux = e.weight * ve / grid.h()[e.axis];
        out[e.tail] += flux;
        out[e.head] -= flux;
    }
    for (o, w) in out.iter_mut().zip(grid.weights()) {
        *o /= w;
    }
    out
}

/// Midpoint gradient of a nodal field.
pub fn grad(field: &ScalarField) -> EdgeField {
    let values = grad_values(&field.grid, &field.values);
    EdgeField { grid: field.grid.clone(), values }
}

/// Nodal divergence, the negative adjoint of [`grad`]:
/// `⟨grad u, v⟩_edges = −⟨u, div v⟩_nodes` for every `u` and `v`.
pub fn div(field: &EdgeField) -> ScalarField {
    let values = div_values(&field.grid, &field.values);
    ScalarField::from_vec_unchecked(field.grid.clone(), values)
}

/// Trapezoid-rule integral over the grid's box.
pub fn integrate(field: &ScalarField) -> f64 {
    field.grid.weights().iter().zip(&field.values).map(|(w, v)| w * v).sum()
}

/// Nodal `|∇u|²`: the weighted average of squared midpoint gradients on the
/// edges adjacent to each node. This is the L²-gradient of
/// `μ ↦ ½∫|∇u|² dμ` under arithmetic-mean edge conductivities.
pub(crate) fn node_grad_sq(grid: &Grid, g: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; grid.len()];
    for (e, ge) in grid.edges().iter().zip(g) {
        let c = 0.5 * e.weight * ge * ge;
        out[e.tail] += c;
        out[e.head] += c;
    }
    for (o, w) in out.iter_mut().zip(grid.weights()) {
        *o /= w;
    }
    out
}

/// One box of constant value in a piecewise-constant source description.
#[derive(Debug, Clone, PartialEq)]
pub struct SourcePiece {
    pub region: AxisBox,
    pub value: f64,
}

pub type SourceFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// Description of a source term `f = f⁺ − f⁻`.
#[derive(Clone)]
pub enum SourceSpec {
    /// Sum of indicator functions of boxes.
    PiecewiseConstant(Vec<SourcePiece>),
    /// Arbitrary function sampled at nodes inside `support`, zero elsewhere.
    ClosedForm { support: AxisBox, func: SourceFn },
}

impl fmt::Debug for SourceSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SourceSpec::PiecewiseConstant(p) => f.debug_tuple("PiecewiseConstant").field(p).finish(),
            SourceSpec::ClosedForm { support, .. } => {
                f.debug_struct("ClosedForm").field("support", support).finish_non_exhaustive()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SourceOptions {
    /// Subtract the discrete mean on the support instead of rejecting a
    /// source whose integral is not zero.
    pub allow_mean_correction: bool,
    /// Minimal distance from the support to the outer boundary. `None` only
    /// requires strict containment.
    pub margin: Option<f64>,
}

/// A zero-mean source term on a grid.
#[derive(Debug, Clone)]
pub struct SourceData {
    field: ScalarField,
    support_box: Option<AxisBox>,
    spec: SourceSpec,
    mean_correction: f64,
}

impl SourceData {
    pub fn field(&self) -> &ScalarField {
        &self.field
    }
    pub fn grid(&self) -> &Arc<Grid> {
        self.field.grid()
    }
    /// `None` for the zero source.
    pub fn support_box(&self) -> Option<&AxisBox> {
        self.support_box.as_ref()
    }
    pub fn spec(&self) -> &SourceSpec {
        &self.spec
    }
    /// Constant subtracted on the support to make the discrete integral vanish.
    pub fn mean_correction(&self) -> f64 {
        self.mean_correction
    }
    pub fn is_zero(&self) -> bool {
        self.field.values().iter().all(|v| *v == 0.0)
    }
}

/// Tolerance below which a source integral counts as zero, relative to
/// `‖f‖_∞·|Ω|`.
const ZERO_MEAN_REL_TOL: f64 = 1e-12;

/// Samples a source on `grid` and enforces `∫f = 0`.
///
/// Piecewise-constant pieces are sampled by their exact average over each
/// node's dual cell, so the discrete integral of every piece is exact and
/// nodes lying on a jump take the mean of the two one-sided values.
pub fn make_source(grid: &Arc<Grid>, spec: SourceSpec, options: SourceOptions) -> Result<SourceData> {
    let (values, support) = match &spec {
        SourceSpec::PiecewiseConstant(pieces) => {
            let mut support: Option<AxisBox> = None;
            for p in pieces {
                if p.region.dim() != grid.dim() {
                    return Err(Error::InvalidSource("piece dimension differs from grid".into()));
                }
                if !p.value.is_finite() {
                    return Err(Error::InvalidSource("piece value must be finite".into()));
                }
                if p.value != 0.0 {
                    support = Some(match support {
                        None => p.region.clone(),
                        Some(s) => s.hull(&p.region),
                    });
                }
            }
            let values = (0..grid.len())
                .map(|i| {
                    pieces
                        .iter()
                        .map(|p| p.value * dual_cell_fraction(grid, i, &p.region))
                        .sum::<f64>()
                })
                .collect::<Vec<_>>();
            (values, support)
        }
        SourceSpec::ClosedForm { support, func } => {
            if support.dim() != grid.dim() {
                return Err(Error::InvalidSource("support dimension differs from grid".into()));
            }
            let values = (0..grid.len())
                .map(|i| {
                    let x = grid.coord(i);
                    let x = &x[..grid.dim()];
                    if support.contains(x) {
                        func(x)
                    } else {
                        0.0
                    }
                })
                .collect::<Vec<_>>();
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidSource("closed-form source produced a non-finite value".into()));
            }
            (values, Some(support.clone()))
        }
    };

    if let Some(s) = &support {
        check_inside(grid, s, options.margin)?;
    }

    let mut values = values;
    let fmax = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = fmax * grid.volume();
    let raw = weighted_sum(grid, &values);
    if raw.abs() > ZERO_MEAN_REL_TOL * scale && !options.allow_mean_correction {
        return Err(Error::InvalidSource(format!(
            "source integral is {raw:.6e}, expected 0 (enable mean correction to subtract it)"
        )));
    }

    let mut correction = 0.0;
    if fmax > 0.0 {
        let on_support: Vec<usize> = (0..grid.len()).filter(|&i| values[i] != 0.0).collect();
        let support_volume: f64 = on_support.iter().map(|&i| grid.weights()[i]).sum();
        // second pass mops up rounding from the first
        for _ in 0..2 {
            let m = weighted_sum(grid, &values) / support_volume;
            for &i in &on_support {
                values[i] -= m;
            }
            correction += m;
        }
    }

    let field = ScalarField::new(grid.clone(), values)?;
    Ok(SourceData { field, support_box: support, spec, mean_correction: correction })
}

fn weighted_sum(grid: &Grid, v: &[f64]) -> f64 {
    grid.weights().iter().zip(v).map(|(w, v)| w * v).sum()
}

fn check_inside(grid: &Grid, support: &AxisBox, margin: Option<f64>) -> Result<()> {
    let m = margin.unwrap_or(0.0);
    for a in 0..grid.dim() {
        let gap_lo = support.lo[a] - grid.lo()[a];
        let gap_hi = grid.hi()[a] - support.hi[a];
        if gap_lo <= 0.0 || gap_hi <= 0.0 || gap_lo < m || gap_hi < m {
            return Err(Error::InvalidSource(format!(
                "support must lie strictly inside the domain (axis {a}: gaps {gap_lo}, {gap_hi}, margin {m})"
            )));
        }
    }
    Ok(())
}

/// Fraction of node `i`'s dual cell covered by `region`.
fn dual_cell_fraction(grid: &Grid, i: usize, region: &AxisBox) -> f64 {
    let x = grid.coord(i);
    let mut frac = 1.0;
    for a in 0..grid.dim() {
        let half = 0.5 * grid.h()[a];
        let c_lo = (x[a] - half).max(grid.lo()[a]);
        let c_hi = (x[a] + half).min(grid.hi()[a]);
        let overlap = (c_hi.min(region.hi[a]) - c_lo.max(region.lo[a])).max(0.0);
        frac *= overlap / (c_hi - c_lo);
        if frac == 0.0 {
            break;
        }
    }
    frac
}

/// Box domain enclosing `support` with the given margin on every side;
/// `margin = None` uses half the support diameter.
pub fn enclosing_domain(support: &AxisBox, margin: Option<f64>) -> AxisBox {
    let m = margin.unwrap_or(0.5 * support.diameter());
    AxisBox {
        lo: support.lo.iter().map(|v| v - m).collect(),
        hi: support.hi.iter().map(|v| v + m).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn piece(lo: f64, hi: f64, value: f64) -> SourcePiece {
        SourcePiece { region: AxisBox::new(vec![lo], vec![hi]).unwrap(), value }
    }

    #[test]
    fn spacing_and_nodes() {
        let g = build_grid(1, &[-1.5], &[1.5], &[4]).unwrap();
        assert_eq!(g.h()[0], 1.0);
        let xs: Vec<f64> = g.coords().map(|x| x[0]).collect();
        assert_eq!(xs, vec![-1.5, -0.5, 0.5, 1.5]);

        let g = build_grid(1, &[-1.5], &[1.5], &[301]).unwrap();
        assert!((g.h()[0] - 0.01).abs() < 1e-15);
    }

    #[test]
    fn boundary_enumeration_2d() {
        let g = build_grid(2, &[-1.0, -1.0], &[1.0, 1.0], &[3, 3]).unwrap();
        assert_eq!(g.len(), 9);
        assert_eq!(g.boundary_mask().iter().filter(|b| **b).count(), 8);
        assert!(!g.is_boundary(4));
        assert_eq!(g.cells().len(), 4);
        assert_eq!(g.edges().len(), 12);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(build_grid(1, &[0.0], &[1.0], &[2]).is_err());
        assert!(build_grid(1, &[1.0], &[0.0], &[5]).is_err());
        assert!(build_grid(1, &[f64::NAN], &[1.0], &[5]).is_err());
        assert!(build_grid(3, &[0.0; 3], &[1.0; 3], &[3; 3]).is_err());
    }

    #[test]
    fn weights_sum_to_volume() {
        let g = build_grid(2, &[-1.0, 0.0], &[2.0, 0.5], &[7, 5]).unwrap();
        let s: f64 = g.weights().iter().sum();
        assert!((s - 1.5).abs() < 1e-14);
        let one = ScalarField::constant(g.clone(), 1.0);
        assert!((integrate(&one) - 1.5).abs() < 1e-14);
        let e: f64 = g.edges().iter().filter(|e| e.axis == 0).map(|e| e.weight).sum();
        assert!((e - 1.5).abs() < 1e-14);
    }

    #[test]
    fn integrate_one() {
        let g = build_grid(1, &[-1.5], &[1.5], &[31]).unwrap();
        assert!((integrate(&ScalarField::constant(g, 1.0)) - 3.0).abs() < 1e-14);
    }

    #[test]
    fn grad_of_constant_vanishes() {
        for g in [
            build_grid(1, &[-1.0], &[1.0], &[9]).unwrap(),
            build_grid(2, &[-1.0, -1.0], &[1.0, 2.0], &[5, 6]).unwrap(),
        ] {
            let c = ScalarField::constant(g.clone(), 3.7);
            let gr = grad(&c);
            assert!(gr.values().iter().all(|v| *v == 0.0));
            assert!(div(&gr).values().iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn divergence_is_negative_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for g in [
            build_grid(1, &[-1.5], &[1.5], &[17]).unwrap(),
            build_grid(2, &[-1.0, -0.5], &[1.0, 1.5], &[6, 9]).unwrap(),
        ] {
            for _ in 0..10 {
                let u = ScalarField::from_fn(g.clone(), |_| rng.random_range(-1.0..1.0));
                let v = EdgeField::new(
                    g.clone(),
                    (0..g.edges().len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap();
                let lhs = grad(&u).inner(&v).unwrap();
                let rhs = u.inner(&div(&v)).unwrap();
                assert!((lhs + rhs).abs() < 1e-13, "{lhs} vs {rhs}");
            }
        }
    }

    #[test]
    fn antisymmetric_source_needs_no_correction() {
        let g = build_grid(1, &[-1.5], &[1.5], &[301]).unwrap();
        let s = make_source(
            &g,
            SourceSpec::PiecewiseConstant(vec![piece(-1.0, 0.0, 1.0), piece(0.0, 1.0, -1.0)]),
            SourceOptions::default(),
        )
        .unwrap();
        assert!(s.mean_correction().abs() < 1e-15);
        assert!(integrate(s.field()).abs() < 1e-14 * 3.0);
        // node on a jump takes the mean of the one-sided values
        assert!((s.field().values()[50] - 0.5).abs() < 1e-12);
        assert!(s.field().values()[150].abs() < 1e-12);
    }

    #[test]
    fn nonzero_mean_rejected_by_default() {
        let g = build_grid(1, &[-1.5], &[1.5], &[61]).unwrap();
        let spec = SourceSpec::PiecewiseConstant(vec![piece(-1.0, 0.0, 1.0)]);
        assert!(make_source(&g, spec.clone(), SourceOptions::default()).is_err());
        let s = make_source(
            &g,
            spec,
            SourceOptions { allow_mean_correction: true, ..Default::default() },
        )
        .unwrap();
        assert!(s.mean_correction() > 0.0);
        assert!(integrate(s.field()).abs() < 1e-14);
        // still vanishes away from the piece
        assert_eq!(s.field().values()[0], 0.0);
        assert_eq!(s.field().values()[60], 0.0);
    }

    #[test]
    fn zero_source_is_valid() {
        let g = build_grid(1, &[-1.5], &[1.5], &[11]).unwrap();
        let s = make_source(&g, SourceSpec::PiecewiseConstant(vec![]), SourceOptions::default()).unwrap();
        assert!(s.is_zero());
        assert!(s.support_box().is_none());
    }

    #[test]
    fn support_touching_boundary_rejected() {
        let g = build_grid(1, &[-1.0], &[1.0], &[11]).unwrap();
        let spec = SourceSpec::PiecewiseConstant(vec![piece(-1.0, 0.0, 1.0), piece(0.0, 0.5, -2.0)]);
        assert!(make_source(&g, spec, SourceOptions::default()).is_err());
        let spec = SourceSpec::PiecewiseConstant(vec![piece(-0.9, 0.0, 1.0), piece(0.0, 0.9, -1.0)]);
        assert!(make_source(&g, spec.clone(), SourceOptions::default()).is_ok());
        assert!(make_source(&g, spec, SourceOptions { margin: Some(0.5), ..Default::default() }).is_err());
    }

    #[test]
    fn closed_form_source_is_mean_corrected() {
        let g = build_grid(2, &[-2.0, -2.0], &[2.0, 2.0], &[41, 41]).unwrap();
        let support = AxisBox::new(vec![-1.0, -1.0], vec![1.0, 1.0]).unwrap();
        let func: SourceFn = Arc::new(|x: &[f64]| x[0] + 0.1);
        let s = make_source(
            &g,
            SourceSpec::ClosedForm { support, func },
            SourceOptions { allow_mean_correction: true, ..Default::default() },
        )
        .unwrap();
        assert!(integrate(s.field()).abs() < 1e-14 * 16.0);
        assert!((s.mean_correction() - 0.1).abs() < 0.05);
    }

    #[test]
    fn enclosing_domain_uses_half_diameter() {
        let s = AxisBox::new(vec![-1.0], vec![1.0]).unwrap();
        let d = enclosing_domain(&s, None);
        assert_eq!(d.lo, vec![-2.0]);
        assert_eq!(d.hi, vec![2.0]);
    }
}
