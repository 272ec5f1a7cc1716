//! Interval discretization and quadrature over pairs of points.
//!
//! The computational domain is Ω = (−L, L) embedded in the truncated line
//! [−R, R]. Functions are continuous piecewise-linear on a uniform grid of
//! `M` interior nodes and vanish identically outside Ω. The exterior
//! [−R, −L] ∪ [L, R] is meshed with cells no wider than the interior spacing
//! so kernels can be sampled there; the region |y| > R is accounted for by
//! the closed-form tail integral of |x − y|^{−1−sp}.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gauss;

/// Sentinel cell index for points beyond the truncation radius.
pub const BEYOND: u32 = u32::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub half_width: f64,
    pub truncation_radius: f64,
}

impl Domain {
    pub fn new(half_width: f64, truncation_radius: f64) -> Result<Self> {
        if !(half_width > 0.0 && half_width.is_finite()) {
            return Err(Error::invalid(format!("half width L must be positive, got {half_width}")));
        }
        if !(truncation_radius > half_width) {
            return Err(Error::invalid(format!(
                "truncation radius R = {truncation_radius} must exceed L = {half_width}"
            )));
        }
        Ok(Domain {
            half_width,
            truncation_radius,
        })
    }

    pub fn contains(&self, x: f64) -> bool {
        x.abs() < self.half_width
    }
}

#[derive(Debug, Clone)]
pub struct Grid {
    domain: Domain,
    nodes: Vec<f64>,
    interior_mask: Vec<bool>,
    spacing: f64,
    exterior_spacing: f64,
    interior: usize,
    offset: usize,
}

/// Builds the grid with `m` interior nodes uniform on (−L, L) and exterior
/// cells of width at most `h = 2L/(m+1)` on both sides up to ±R.
pub fn build_grid(half_width: f64, truncation_radius: f64, m: usize) -> Result<Grid> {
    if m < 3 {
        return Err(Error::invalid(format!("need at least 3 interior nodes, got {m}")));
    }
    let domain = Domain::new(half_width, truncation_radius)?;
    let (l, r) = (half_width, truncation_radius);
    let h = 2.0 * l / (m as f64 + 1.0);
    let n_ext = (((r - l) / h) - 1e-9).ceil().max(1.0) as usize;
    let he = (r - l) / n_ext as f64;

    let mut nodes = Vec::with_capacity(2 * n_ext + m + 2);
    for k in 0..n_ext {
        nodes.push(-r + k as f64 * he);
    }
    nodes.push(-l);
    for j in 1..=m {
        nodes.push(-l + j as f64 * h);
    }
    nodes.push(l);
    for k in 1..n_ext {
        nodes.push(l + k as f64 * he);
    }
    nodes.push(r);

    let offset = n_ext;
    let interior_mask = (0..nodes.len())
        .map(|k| k > offset && k <= offset + m)
        .collect();
    Ok(Grid {
        domain,
        nodes,
        interior_mask,
        spacing: h,
        exterior_spacing: he,
        interior: m,
        offset,
    })
}

impl Grid {
    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn half_width(&self) -> f64 {
        self.domain.half_width
    }

    pub fn truncation_radius(&self) -> f64 {
        self.domain.truncation_radius
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn interior_mask(&self) -> &[bool] {
        &self.interior_mask
    }

    /// Interior spacing `h`.
    pub fn spacing(&self) -> f64 {
        self.spacing
    }

    pub fn exterior_spacing(&self) -> f64 {
        self.exterior_spacing
    }

    /// Number of interior nodes `M` (the number of unknowns).
    pub fn interior_count(&self) -> usize {
        self.interior
    }

    pub fn interior_nodes(&self) -> &[f64] {
        &self.nodes[self.offset + 1..=self.offset + self.interior]
    }

    pub fn cell_count(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn cell_bounds(&self, cell: usize) -> (f64, f64) {
        (self.nodes[cell], self.nodes[cell + 1])
    }

    /// Cells inside Ω, in increasing order.
    pub fn omega_cells(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.interior + 1
    }

    pub fn is_omega_cell(&self, cell: u32) -> bool {
        cell != BEYOND && self.omega_cells().contains(&(cell as usize))
    }

    /// Unknown index of grid node `k`, if the node is interior.
    pub fn unknown_of_node(&self, k: usize) -> Option<usize> {
        (k > self.offset && k <= self.offset + self.interior).then(|| k - self.offset - 1)
    }

    /// Basis contributions at `x` in `cell`: (unknown index or `M` for a
    /// node carrying the fixed value zero, coefficient).
    pub(crate) fn basis(&self, cell: u32, x: f64) -> [(usize, f64); 2] {
        let m = self.interior;
        if !self.is_omega_cell(cell) {
            return [(m, 0.0), (m, 0.0)];
        }
        let c = cell as usize;
        let (a, b) = self.cell_bounds(c);
        let t = (x - a) / (b - a);
        let left = self.unknown_of_node(c).unwrap_or(m);
        let right = self.unknown_of_node(c + 1).unwrap_or(m);
        [(left, 1.0 - t), (right, t)]
    }

    /// Interpolates `f` at the interior nodes.
    pub fn interpolate(&self, f: impl Fn(f64) -> f64) -> DiscreteFunction {
        DiscreteFunction {
            values: self.interior_nodes().iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zeros(&self) -> DiscreteFunction {
        DiscreteFunction {
            values: vec![0.0; self.interior],
        }
    }
}

/// Continuous piecewise-linear function, zero on ∂Ω and outside Ω.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteFunction {
    pub values: Vec<f64>,
}

impl DiscreteFunction {
    pub fn new(values: Vec<f64>) -> Self {
        DiscreteFunction { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn eval(&self, grid: &Grid, x: f64) -> f64 {
        let l = grid.half_width();
        if x.abs() >= l {
            return 0.0;
        }
        let m = grid.interior_count();
        let h = grid.spacing();
        let j = (((x + l) / h).floor() as usize).min(m);
        let t = (x + l) / h - j as f64;
        let left = if j == 0 { 0.0 } else { self.values[j - 1] };
        let right = if j == m { 0.0 } else { self.values[j] };
        left * (1.0 - t) + right * t
    }

    /// Values padded with a trailing zero for the fixed boundary slot.
    pub(crate) fn padded(&self) -> Vec<f64> {
        let mut v = self.values.clone();
        v.push(0.0);
        v
    }

    pub fn scaled(&self, c: f64) -> Self {
        DiscreteFunction {
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    pub fn axpy(&self, a: f64, other: &DiscreteFunction) -> Self {
        DiscreteFunction {
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(u, v)| u + a * v)
                .collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// ∫_Ω u ψ dx with a 4-point Gauss rule per cell.
    pub fn pair_with(&self, grid: &Grid, psi: impl Fn(f64) -> f64) -> f64 {
        cell_gauss_sum(grid, 4, |x| self.eval(grid, x) * psi(x))
    }

    /// ‖u‖_{L^p(Ω)} with a 4-point Gauss rule per cell.
    pub fn lp_norm(&self, grid: &Grid, p: f64) -> f64 {
        cell_gauss_sum(grid, 4, |x| self.eval(grid, x).abs().powf(p)).powf(1.0 / p)
    }
}

/// Sum of a Gauss rule of order `n` over every cell of Ω.
pub(crate) fn cell_gauss_sum(grid: &Grid, n: usize, f: impl Fn(f64) -> f64) -> f64 {
    let rule = gauss::unit_rule(n);
    let mut total = 0.0;
    for c in grid.omega_cells() {
        let (a, b) = grid.cell_bounds(c);
        let mut local = 0.0;
        for &(t, w) in rule {
            local += w * f(a + (b - a) * t);
        }
        total += local * (b - a);
    }
    total
}

/// Element of the dual space: the nodal vector v ↦ ⟨f, v⟩ = Σ f_i v_i.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualVector {
    pub values: Vec<f64>,
}

impl DualVector {
    pub fn new(values: Vec<f64>) -> Self {
        DualVector { values }
    }

    pub fn zeros(m: usize) -> Self {
        DualVector {
            values: vec![0.0; m],
        }
    }

    /// Load vector ∫ f ψ_i of a density `f` on Ω.
    pub fn from_density(grid: &Grid, f: impl Fn(f64) -> f64) -> Self {
        let m = grid.interior_count();
        let mut values = vec![0.0; m + 1];
        let rule = gauss::unit_rule(5);
        for c in grid.omega_cells() {
            let (a, b) = grid.cell_bounds(c);
            for &(t, w) in rule {
                let x = a + (b - a) * t;
                let fx = f(x) * w * (b - a);
                for (k, coef) in grid.basis(c as u32, x) {
                    values[k] += fx * coef;
                }
            }
        }
        values.truncate(m);
        DualVector { values }
    }

    pub fn pairing(&self, u: &DiscreteFunction) -> f64 {
        self.values.iter().zip(&u.values).map(|(f, u)| f * u).sum()
    }

    pub fn scaled(&self, c: f64) -> Self {
        DualVector {
            values: self.values.iter().map(|v| c * v).collect(),
        }
    }

    pub fn sub(&self, other: &DualVector) -> Self {
        DualVector {
            values: self.values.iter().zip(&other.values).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn norm2(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

/// ∫_{|y|>R} |x − y|^{−1−sp} dy = [(R − x)^{−sp} + (R + x)^{−sp}]/(sp).
pub fn exterior_tail_weight(x: f64, truncation_radius: f64, s: f64, p: f64) -> f64 {
    let sp = s * p;
    if truncation_radius.is_infinite() {
        return 0.0;
    }
    ((truncation_radius - x).powf(-sp) + (truncation_radius + x).powf(-sp)) / sp
}

/// One quadrature node of the pair rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairPoint {
    pub x: f64,
    pub y: f64,
    pub weight: f64,
    /// |x − y|, computed without cancellation near the diagonal.
    pub dist: f64,
    pub cell_x: u32,
    pub cell_y: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Both points in Ω.
    Interior,
    /// One point in Ω, the other in the meshed exterior.
    Exterior,
    /// One point in Ω, the other beyond the truncation radius.
    Tail,
}

/// Quadrature over the pairs (x, y) with at least one point in Ω.
///
/// Points come in mirror pairs: `points[2k + 1]` is `points[2k]` with x and
/// y swapped and the same weight, so the rule is exactly swap-invariant.
#[derive(Debug, Clone)]
pub struct PairQuadrature {
    points: Vec<PairPoint>,
    depth: usize,
    s: f64,
    p: f64,
}

const DIAG_Z_ORDER: usize = 4;
const DIAG_Y_ORDER: usize = 3;
// Degree 19 in t after the quartic substitution keeps cubics exact.
const DIAG_INNER_ORDER: usize = 10;
const CORNER_ORDER: usize = 3;
const TAIL_ORDER: usize = 4;

/// Order of the tensor Gauss rule for two separated cells.
fn separated_order(gap: f64, width: f64) -> usize {
    let ratio = gap / width;
    if ratio < 1.5 {
        6
    } else if ratio < 4.0 {
        4
    } else if ratio < 10.0 {
        3
    } else {
        2
    }
}

/// Rule on the half square {a < y < x < b}, graded geometrically toward the
/// diagonal. Returns (x, y, weight, |x − y|).
pub fn diagonal_rule(a: f64, b: f64, depth: usize) -> Vec<(f64, f64, f64, f64)> {
    let hw = b - a;
    let zr = gauss::unit_rule(DIAG_Z_ORDER);
    let yr = gauss::unit_rule(DIAG_Y_ORDER);
    let mut z_nodes: Vec<(f64, f64)> = Vec::with_capacity((depth + 1) * DIAG_Z_ORDER);
    for k in 0..depth {
        let hi = 0.5f64.powi(k as i32);
        let lo = 0.5 * hi;
        for &(t, w) in zr {
            z_nodes.push((lo + (hi - lo) * t, (hi - lo) * w));
        }
    }
    // Innermost piece: z = δ t⁴, which smooths integrable powers of z.
    let delta = 0.5f64.powi(depth as i32);
    for &(t, w) in gauss::unit_rule(DIAG_INNER_ORDER) {
        let t3 = t * t * t;
        z_nodes.push((delta * t3 * t, 4.0 * delta * t3 * w));
    }
    let mut out = Vec::with_capacity(z_nodes.len() * DIAG_Y_ORDER);
    for (z, wz) in z_nodes {
        let span = 1.0 - z;
        for &(t, wy) in yr {
            let y = span * t;
            let x = y + z;
            out.push((a + hw * x, a + hw * y, hw * hw * wz * wy * span, hw * z));
        }
    }
    out
}

/// Rule on `[xa, xb] × [ya, yb]` for two cells sharing the vertex `v`,
/// graded geometrically toward (v, v).
pub fn corner_rule(xa: f64, xb: f64, ya: f64, yb: f64, v: f64, depth: usize) -> Vec<(f64, f64, f64)> {
    let (hx, sx) = if (xb - v).abs() <= (xa - v).abs() { (xb - xa, -1.0) } else { (xb - xa, 1.0) };
    let (hy, sy) = if (yb - v).abs() <= (ya - v).abs() { (yb - ya, -1.0) } else { (yb - ya, 1.0) };
    let g = gauss::unit_rule(CORNER_ORDER);
    let mut squares: Vec<(f64, f64, f64)> = Vec::with_capacity(3 * depth + 1);
    for k in 0..depth {
        let hi = 0.5f64.powi(k as i32);
        let lo = 0.5 * hi;
        let side = hi - lo;
        squares.push((lo, 0.0, side));
        squares.push((0.0, lo, side));
        squares.push((lo, lo, side));
    }
    let last = 0.5f64.powi(depth as i32);
    squares.push((0.0, 0.0, last));
    let mut out = Vec::with_capacity(squares.len() * CORNER_ORDER * CORNER_ORDER);
    for (x0, y0, side) in squares {
        for &(tx, wx) in g {
            for &(ty, wy) in g {
                let xi = x0 + side * tx;
                let eta = y0 + side * ty;
                out.push((v + sx * xi * hx, v + sy * eta * hy, hx * hy * side * side * wx * wy));
            }
        }
    }
    out
}

/// Tensor Gauss rule on a cell pair.
pub fn tensor_rule(xa: f64, xb: f64, ya: f64, yb: f64, order: usize) -> Vec<(f64, f64, f64)> {
    let g = gauss::unit_rule(order);
    let mut out = Vec::with_capacity(order * order);
    for &(tx, wx) in g {
        for &(ty, wy) in g {
            out.push((xa + (xb - xa) * tx, ya + (yb - ya) * ty, (xb - xa) * (yb - ya) * wx * wy));
        }
    }
    out
}

fn check_sp(s: f64, p: f64) -> Result<()> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::invalid(format!("s must lie in (0,1), got {s}")));
    }
    if !(p > 1.0 && p.is_finite()) {
        return Err(Error::invalid(format!("p must lie in (1,∞), got {p}")));
    }
    Ok(())
}

/// Builds the pair rule for `grid` and exponents `(s, p)`.
///
/// `depth` is the number of geometric refinement levels toward the diagonal
/// (and toward shared vertices of neighbouring cells).
pub fn pair_quadrature(grid: &Grid, s: f64, p: f64, depth: usize) -> Result<PairQuadrature> {
    check_sp(s, p)?;
    if depth < 1 {
        return Err(Error::invalid("diagonal refinement depth must be at least 1"));
    }
    let omega: Vec<usize> = grid.omega_cells().collect();
    let all_cells = grid.cell_count();
    let mut points = Vec::new();

    let mut push = |x: f64, y: f64, w: f64, d: f64, cx: usize, cy: usize| {
        points.push(PairPoint {
            x,
            y,
            weight: w,
            dist: d,
            cell_x: cx as u32,
            cell_y: cy as u32,
        });
        points.push(PairPoint {
            x: y,
            y: x,
            weight: w,
            dist: d,
            cell_x: cy as u32,
            cell_y: cx as u32,
        });
    };

    for &ci in &omega {
        let (xa, xb) = grid.cell_bounds(ci);
        for cj in ci..all_cells {
            let in_omega = grid.is_omega_cell(cj as u32);
            let (ya, yb) = grid.cell_bounds(cj);
            if cj == ci {
                for (x, y, w, d) in diagonal_rule(xa, xb, depth) {
                    push(x, y, w, d, ci, ci);
                }
            } else if cj == ci + 1 {
                for (x, y, w) in corner_rule(xa, xb, ya, yb, xb, depth) {
                    push(x, y, w, (y - x).abs(), ci, cj);
                }
            } else {
                let order = separated_order(ya - xb, (xb - xa).max(yb - ya));
                for (x, y, w) in tensor_rule(xa, xb, ya, yb, order) {
                    push(x, y, w, (y - x).abs(), ci, cj);
                }
            }
            let _ = in_omega;
        }
        // Exterior cells to the left of Ω.
        for cj in 0..grid.omega_cells().start {
            let (ya, yb) = grid.cell_bounds(cj);
            if cj + 1 == ci {
                for (x, y, w) in corner_rule(xa, xb, ya, yb, xa, depth) {
                    push(x, y, w, (y - x).abs(), ci, cj);
                }
            } else {
                let order = separated_order(xa - yb, (xb - xa).max(yb - ya));
                for (x, y, w) in tensor_rule(xa, xb, ya, yb, order) {
                    push(x, y, w, (y - x).abs(), ci, cj);
                }
            }
        }
    }

    // |y| > R: one node per side with the tail integral folded into the weight.
    let r = grid.truncation_radius();
    let sp = s * p;
    let tail = gauss::unit_rule(TAIL_ORDER);
    for &ci in &omega {
        let (xa, xb) = grid.cell_bounds(ci);
        for &(t, w) in tail {
            let x = xa + (xb - xa) * t;
            let wx = w * (xb - xa);
            for side in [1.0, -1.0] {
                let dist = r - side * x;
                let weight = wx * dist / sp;
                points.push(PairPoint {
                    x,
                    y: side * r,
                    weight,
                    dist,
                    cell_x: ci as u32,
                    cell_y: BEYOND,
                });
                points.push(PairPoint {
                    x: side * r,
                    y: x,
                    weight,
                    dist,
                    cell_x: BEYOND,
                    cell_y: ci as u32,
                });
            }
        }
    }

    Ok(PairQuadrature { points, depth, s, p })
}

impl PairQuadrature {
    pub fn points(&self) -> &[PairPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn exponents(&self) -> (f64, f64) {
        (self.s, self.p)
    }

    /// Index of the swapped point.
    pub fn mirror(q: usize) -> usize {
        q ^ 1
    }

    pub fn region(&self, grid: &Grid, q: usize) -> Region {
        let pt = &self.points[q];
        if pt.cell_x == BEYOND || pt.cell_y == BEYOND {
            Region::Tail
        } else if grid.is_omega_cell(pt.cell_x) && grid.is_omega_cell(pt.cell_y) {
            Region::Interior
        } else {
            Region::Exterior
        }
    }

    /// Σ_q w_q g(x_q, y_q, |x_q − y_q|) over the points in cells `(ci, cj)`.
    pub fn integrate_cell_pair(&self, ci: u32, cj: u32, g: impl Fn(f64, f64, f64) -> f64) -> f64 {
        self.points
            .iter()
            .filter(|pt| pt.cell_x == ci && pt.cell_y == cj)
            .map(|pt| pt.weight * g(pt.x, pt.y, pt.dist))
            .sum()
    }
}
