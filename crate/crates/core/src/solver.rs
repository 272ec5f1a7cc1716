//! Dirichlet problem L_a u = f solved by minimizing
//! J(u) = (1/(2p))∬ a|D_{s,p}u|^p − ⟨f, u⟩.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fraccalc::{dual_norm, flux, random_smooth, seminorm, spow, Discretization, FracParams, Operator};
use crate::grid::{DiscreteFunction, DualVector};
use crate::kernels::{validate_kernel, Kernel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Direct solve at p = 2, descent otherwise.
    Auto,
    Direct,
    Descent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub method: Method,
    #[serde(skip)]
    pub initial: Option<DiscreteFunction>,
    /// Skip the a ≡ 1 auxiliary solve when the dual norm of f is known.
    #[serde(skip)]
    pub dual_norm: Option<f64>,
}

impl SolveOptions {
    pub fn for_params(params: &FracParams) -> Self {
        SolveOptions {
            tol: if params.p == 2.0 { 1e-9 } else { 1e-7 },
            max_iter: 5000,
            method: Method::Auto,
            initial: None,
            dual_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DirichletProblem {
    pub disc: Discretization,
    pub kernel: Kernel,
    pub load: DualVector,
}

impl DirichletProblem {
    pub fn new(disc: Discretization, kernel: Kernel, load: DualVector) -> Result<Self> {
        if load.values.len() != disc.interior() {
            return Err(Error::LengthMismatch(format!(
                "load has {} entries, grid {}",
                load.values.len(),
                disc.interior()
            )));
        }
        if load.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("load contains non-finite entries"));
        }
        Ok(DirichletProblem { disc, kernel, load })
    }
}

/// Outcome of the minimization alone.
#[derive(Debug, Clone, PartialEq)]
pub struct Minimization {
    pub solution: DiscreteFunction,
    pub energy: f64,
    pub residual: f64,
    pub iterations: usize,
    pub energy_history: Vec<f64>,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub solution: DiscreteFunction,
    pub energy: f64,
    pub residual: f64,
    pub iterations: usize,
    pub method: Method,
    pub seminorm: f64,
    /// ‖ξ‖_{p'} of the flux a|D_{s,p}u|^{p−2}D_{s,p}u.
    pub flux_norm: f64,
    pub dual_norm: f64,
    pub apriori_bound: f64,
    pub flux_bound: f64,
    /// ‖u‖_{L^p}/[u]_{s,p}, compared against the empirical Poincaré constant.
    pub poincare_ratio: f64,
    pub tol: f64,
    pub energy_history: Vec<f64>,
}

/// Solves the problem after validating the kernel on the truncated domain.
pub fn solve(prob: &DirichletProblem, opts: &SolveOptions) -> Result<SolveReport> {
    if !(opts.tol > 0.0) {
        return Err(Error::invalid(format!("tolerance must be positive, got {}", opts.tol)));
    }
    validate_kernel(&prob.kernel, 2500, prob.disc.grid.truncation_radius())?.into_result()?;
    let op = Operator::assemble(&prob.disc, &prob.kernel)?;
    let min = solve_operator(&prob.disc, &op, &prob.load, opts)?;
    let dn = match opts.dual_norm {
        Some(v) => v,
        None => dual_norm(&prob.disc, &prob.load)?.value,
    };
    Ok(finish_report(&prob.disc, &prob.kernel, min, dn, opts.tol))
}

pub(crate) fn finish_report(
    disc: &Discretization,
    kernel: &Kernel,
    min: Minimization,
    dual_norm: f64,
    tol: f64,
) -> SolveReport {
    let params = disc.params;
    let semi = seminorm(disc, &min.solution);
    let xi = flux(disc, kernel, &min.solution);
    let (apriori_bound, flux_bound) = bounds(&params, kernel.lower(), kernel.upper(), dual_norm);
    let lp = min.solution.lp_norm(&disc.grid, params.p);
    SolveReport {
        seminorm: semi,
        flux_norm: xi.norm(disc, params.p_conj),
        dual_norm,
        apriori_bound,
        flux_bound,
        poincare_ratio: if semi > 0.0 { lp / semi } else { 0.0 },
        tol,
        solution: min.solution,
        energy: min.energy,
        residual: min.residual,
        iterations: min.iterations,
        method: min.method,
        energy_history: min.energy_history,
    }
}

/// ([u] bound, ‖ξ‖_{p'} bound) from the dual norm of the load.
pub fn bounds(params: &FracParams, lower: f64, upper: f64, dual_norm: f64) -> (f64, f64) {
    let c = params.normalization;
    let apriori = (2.0 * dual_norm / (c * lower)).powf(1.0 / (params.p - 1.0));
    let flux = 2.0 * upper / lower * dual_norm;
    (apriori, flux)
}

fn residual_norm(grad: &[f64], f: &[f64]) -> f64 {
    grad.iter().zip(f).map(|(g, f)| (g - f) * (g - f)).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn factor(op: &Operator) -> Result<Cholesky<f64, Dyn>> {
    op.quadratic_stiffness()
        .cholesky()
        .ok_or_else(|| Error::Linear("stiffness matrix is not positive definite".into()))
}

fn precondition(chol: &Cholesky<f64, Dyn>, v: &[f64]) -> Vec<f64> {
    chol.solve(&DVector::from_column_slice(v)).as_slice().to_vec()
}

/// Minimizes J for an assembled operator.
pub fn solve_operator(disc: &Discretization, op: &Operator, f: &DualVector, opts: &SolveOptions) -> Result<Minimization> {
    let m = op.interior();
    if f.values.len() != m {
        return Err(Error::LengthMismatch(format!("load has {} entries, grid {m}", f.values.len())));
    }
    let _ = disc;
    if f.is_zero() && opts.initial.is_none() {
        return Ok(Minimization {
            solution: DiscreteFunction::new(vec![0.0; m]),
            energy: 0.0,
            residual: 0.0,
            iterations: 0,
            energy_history: vec![0.0],
            method: Method::Direct,
        });
    }
    let p = op.params().p;
    let method = match opts.method {
        Method::Auto if p == 2.0 => Method::Direct,
        Method::Auto => Method::Descent,
        other => other,
    };
    if method == Method::Direct && p != 2.0 {
        return Err(Error::invalid("direct solve is only available for p = 2"));
    }
    let chol = factor(op)?;
    match method {
        Method::Direct => {
            let u = precondition(&chol, &f.values);
            let (e, g) = op.energy_and_gradient(&u);
            let energy = e - dot(&f.values, &u);
            let residual = residual_norm(&g, &f.values);
            Ok(Minimization {
                solution: DiscreteFunction::new(u),
                energy,
                residual,
                iterations: 1,
                energy_history: vec![0.0, energy],
                method,
            })
        }
        _ => descend(op, &chol, f, opts),
    }
}

/// Iterations without a 1% gain in the residual before giving up.
const STAGNATION_WINDOW: usize = 50;

/// Variable-metric descent with Armijo backtracking. The metric is the
/// energy Hessian with pair differences floored away from zero; when it
/// fails to give a descent direction the quadratic stiffness is used.
fn descend(op: &Operator, chol: &Cholesky<f64, Dyn>, f: &DualVector, opts: &SolveOptions) -> Result<Minimization> {
    let p = op.params().p;
    let fv = &f.values;
    let objective = |u: &[f64]| {
        let (e, mut g) = op.energy_and_gradient(u);
        for (gi, fi) in g.iter_mut().zip(fv) {
            *gi -= fi;
        }
        (e - dot(fv, u), g)
    };

    let mut u = match &opts.initial {
        Some(init) => {
            if init.values.len() != fv.len() {
                return Err(Error::LengthMismatch("initial iterate has the wrong length".into()));
            }
            init.values.clone()
        }
        None => {
            // p = 2 solution scaled to minimize J along its ray.
            let u2 = precondition(chol, fv);
            let e2 = op.energy(&DiscreteFunction::new(u2.clone()));
            let fu = dot(fv, &u2);
            if e2 > 0.0 && fu > 0.0 {
                let c = (fu / (p * e2)).powf(1.0 / (p - 1.0));
                u2.iter().map(|v| c * v).collect()
            } else {
                u2
            }
        }
    };
    let (mut j, mut g) = objective(&u);
    let mut history = vec![j];
    let mut residual = norm(&g);
    let mut stalls = 0;
    let mut iter = 0;
    let mut best_residual = residual;
    let mut last_gain = 0;

    while residual > opts.tol {
        if iter >= opts.max_iter || stalls >= 2 || iter - last_gain > STAGNATION_WINDOW {
            return Err(Error::NonConvergence {
                iterations: iter,
                residual,
                best: u,
            });
        }
        iter += 1;

        let floor = 1e-12 * op.max_difference(&u).max(f64::MIN_POSITIVE);
        let metric = if stalls == 0 {
            op.floored_hessian(&u, floor)
                .cholesky()
                .map(|h| h.solve(&DVector::from_column_slice(&g)).as_slice().iter().map(|v| -v).collect::<Vec<_>>())
        } else {
            None
        };
        let mut dir = metric.unwrap_or_else(|| precondition(chol, &g).iter().map(|v| -v).collect());
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            dir = precondition(chol, &g).iter().map(|v| -v).collect();
            slope = dot(&g, &dir);
        }

        // Once the predicted decrease is below the rounding level of J, J
        // can no longer rank steps and the residual takes over as merit.
        let flat = -slope <= 1e3 * f64::EPSILON * j.abs();
        let accepted = if flat && stalls == 0 {
            residual_search(&objective, &u, &dir, j, residual)
                .or_else(|| line_search(&objective, &u, &dir, j, slope, residual))
        } else {
            line_search(&objective, &u, &dir, j, slope, residual)
        };
        let Some((un, jn, gn)) = accepted else {
            stalls += 1;
            continue;
        };
        stalls = 0;
        u = un;
        j = jn;
        g = gn;
        residual = norm(&g);
        history.push(j);
        if residual < 0.99 * best_residual {
            best_residual = residual;
            last_gain = iter;
        }
    }

    Ok(Minimization {
        solution: DiscreteFunction::new(u),
        energy: j,
        residual,
        iterations: iter,
        energy_history: history,
        method: Method::Descent,
    })
}

/// Step along `dir` for the convex objective: the unit step, expanded while
/// J keeps decreasing, then a few secant steps on the directional
/// derivative. The lowest objective among steps passing Armijo's test wins;
/// if none passes, plain backtracking takes over.
fn line_search(
    objective: &impl Fn(&[f64]) -> (f64, Vec<f64>),
    u: &[f64],
    dir: &[f64],
    j: f64,
    slope: f64,
    residual: f64,
) -> Option<(Vec<f64>, f64, Vec<f64>)> {
    let eval = |a: f64| {
        let trial: Vec<f64> = u.iter().zip(dir).map(|(x, d)| x + a * d).collect();
        let (jt, gt) = objective(&trial);
        let dphi = if jt.is_finite() { dot(&gt, dir) } else { f64::INFINITY };
        (trial, jt, gt, dphi)
    };
    let acceptable = |a: f64, jt: f64, gt: &[f64]| {
        // Near the minimum J is flat to rounding; a smaller gradient decides.
        let flat = jt <= j + 4.0 * f64::EPSILON * j.abs() && norm(gt) < residual;
        jt.is_finite() && (jt <= j + 1e-4 * a * slope || flat)
    };
    let mut best: Option<(Vec<f64>, f64, Vec<f64>)> = None;
    let keep = |trial: Vec<f64>, jt: f64, gt: Vec<f64>, best: &mut Option<(Vec<f64>, f64, Vec<f64>)>| {
        if best.as_ref().is_none_or(|b| jt < b.1) {
            *best = Some((trial, jt, gt));
        }
    };
    let small = 0.1 * slope.abs();

    let mut lo = (0.0, slope);
    let mut hi: Option<(f64, f64)> = None;
    let mut a = 1.0;
    for _ in 0..6 {
        let (trial, jt, gt, dphi) = eval(a);
        let ok = acceptable(a, jt, &gt);
        if ok {
            keep(trial, jt, gt, &mut best);
            if dphi.abs() <= small {
                return best;
            }
        }
        if dphi >= 0.0 || !ok {
            hi = Some((a, dphi));
            break;
        }
        lo = (a, dphi);
        a *= 2.0;
    }
    if let Some(mut h) = hi {
        for _ in 0..4 {
            let width = h.0 - lo.0;
            let secant = if h.1.is_finite() { lo.0 - lo.1 * width / (h.1 - lo.1) } else { lo.0 + 0.5 * width };
            let a = secant.clamp(lo.0 + 0.1 * width, h.0 - 0.1 * width);
            let (trial, jt, gt, dphi) = eval(a);
            if acceptable(a, jt, &gt) {
                keep(trial, jt, gt, &mut best);
            }
            if dphi.abs() <= small {
                break;
            }
            if dphi < 0.0 {
                lo = (a, dphi);
            } else {
                h = (a, dphi);
            }
        }
    }
    if best.is_some() {
        return best;
    }
    let mut a = 0.5;
    for _ in 0..60 {
        let (trial, jt, gt, _) = eval(a);
        if acceptable(a, jt, &gt) {
            return Some((trial, jt, gt));
        }
        a *= 0.5;
    }
    None
}

/// Backtracking on ‖∇J‖ along a Newton direction, which descends for
/// ½‖∇J‖² whenever the metric is the Hessian. J may only move by rounding.
fn residual_search(
    objective: &impl Fn(&[f64]) -> (f64, Vec<f64>),
    u: &[f64],
    dir: &[f64],
    j: f64,
    residual: f64,
) -> Option<(Vec<f64>, f64, Vec<f64>)> {
    let mut a = 1.0;
    for _ in 0..30 {
        let trial: Vec<f64> = u.iter().zip(dir).map(|(x, d)| x + a * d).collect();
        let (jt, gt) = objective(&trial);
        if jt.is_finite() && jt <= j + 64.0 * f64::EPSILON * j.abs() && norm(&gt) <= (1.0 - 1e-4 * a) * residual {
            return Some((trial, jt, gt));
        }
        a *= 0.5;
    }
    None
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinimizerCheck {
    pub passed: bool,
    pub trials: usize,
    /// Largest J(u) − J(u + tv) − slack observed (≤ 0 on success).
    pub worst_excess: f64,
}

/// Checks J(u + tv) ≥ J(u) − 10·tol·(1 + [v]) for t ∈ {±1e−2, ±1e−1}.
///
/// The first direction is the preconditioned descent direction at `u`, the
/// rest random smooth functions; each is scaled to unit maximum.
pub fn verify_minimizer(
    disc: &Discretization,
    op: &Operator,
    f: &DualVector,
    u: &DiscreteFunction,
    tol: f64,
    trials: usize,
    seed: u64,
) -> Result<MinimizerCheck> {
    let j0 = op.energy(u) - f.pairing(u);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dirs = Vec::with_capacity(trials);
    if trials > 0 {
        let chol = factor(op)?;
        let (_, mut g) = op.energy_and_gradient(&u.values);
        for (gi, fi) in g.iter_mut().zip(&f.values) {
            *gi -= fi;
        }
        let d = DiscreteFunction::new(precondition(&chol, &g).iter().map(|v| -v).collect());
        dirs.push(d);
    }
    while dirs.len() < trials {
        dirs.push(random_smooth(&disc.grid, &mut rng, 8));
    }
    let mut worst = f64::NEG_INFINITY;
    for v in dirs {
        let scale = v.max_abs();
        if scale == 0.0 {
            continue;
        }
        let v = v.scaled(1.0 / scale);
        let slack = 10.0 * tol * (1.0 + seminorm(disc, &v));
        for t in [1e-2, -1e-2, 1e-1, -1e-1] {
            let w = u.axpy(t, &v);
            let jt = op.energy(&w) - f.pairing(&w);
            worst = worst.max(j0 - jt - slack);
        }
    }
    if trials == 0 {
        worst = 0.0;
    }
    Ok(MinimizerCheck {
        passed: worst <= 0.0,
        trials,
        worst_excess: worst,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UniquenessReport {
    pub max_distance: f64,
    /// 10·tol^{1/(p−1)}, the heuristic agreement scale.
    pub threshold: f64,
    pub solutions: Vec<DiscreteFunction>,
}

/// Runs the descent solver from `inits` random starting points and returns
/// the largest pairwise L^p distance between the results.
pub fn uniqueness_probe(
    disc: &Discretization,
    op: &Operator,
    f: &DualVector,
    opts: &SolveOptions,
    inits: usize,
    seed: u64,
) -> Result<UniquenessReport> {
    if inits < 2 {
        return Err(Error::invalid("uniqueness probe needs at least 2 initial iterates"));
    }
    let p = op.params().p;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut solutions = Vec::with_capacity(inits);
    for _ in 0..inits {
        let init = random_smooth(&disc.grid, &mut rng, 8);
        let o = SolveOptions {
            method: Method::Descent,
            initial: Some(init),
            ..opts.clone()
        };
        solutions.push(solve_operator(disc, op, f, &o)?.solution);
    }
    let mut max_distance: f64 = 0.0;
    for i in 0..inits {
        for j in i + 1..inits {
            let d = solutions[i].axpy(-1.0, &solutions[j]).lp_norm(&disc.grid, p);
            max_distance = max_distance.max(d);
        }
    }
    Ok(UniquenessReport {
        max_distance,
        threshold: 10.0 * opts.tol.powf(1.0 / (p - 1.0)),
        solutions,
    })
}

/// c_p in the elementary monotonicity inequality.
pub fn simon_constant(p: f64) -> f64 {
    if p >= 2.0 {
        2f64.powf(2.0 - p)
    } else {
        0.5 * (p - 1.0)
    }
}

/// (lhs, rhs) with lhs = (|a|^{p−2}a − |b|^{p−2}b)(a − b) and rhs the
/// c_p lower bound.
pub fn simon_gap(a: f64, b: f64, p: f64) -> (f64, f64) {
    let q = p - 1.0;
    let lhs = (spow(a, q) - spow(b, q)) * (a - b);
    let cp = simon_constant(p);
    let diff = (a - b).abs();
    let rhs = if p >= 2.0 {
        cp * diff.powf(p)
    } else {
        let sum = a.abs() + b.abs();
        if sum == 0.0 {
            0.0
        } else {
            cp * diff * diff / sum.powf(2.0 - p)
        }
    };
    (lhs, rhs)
}

/// (⟨L_a u − L_a v, u − v⟩, (Cλc_p/2)[u − v]^p); the lower bound is only
/// claimed for p ≥ 2 and reported as 0 otherwise.
pub fn monotonicity_gap(disc: &Discretization, op: &Operator, u: &DiscreteFunction, v: &DiscreteFunction) -> (f64, f64) {
    let du = op.apply(u);
    let dv = op.apply(v);
    let w = u.axpy(-1.0, v);
    let lhs = du.sub(&dv).pairing(&w);
    let params = op.params();
    let lower = if params.p >= 2.0 {
        let (lambda, _) = op.kernel_bounds();
        0.5 * params.normalization * lambda * simon_constant(params.p) * seminorm(disc, &w).powf(params.p)
    } else {
        0.0
    };
    (lhs, lower)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub seminorm: f64,
    pub apriori_bound: f64,
    pub flux_norm_pow: f64,
    pub flux_bound_pow: f64,
    pub apriori_ok: bool,
    pub flux_ok: bool,
}

impl BoundCheck {
    pub fn passed(&self) -> bool {
        self.apriori_ok && self.flux_ok
    }
}

/// Relative tolerance for quadrature error in the bound checks.
pub const BOUND_SLACK: f64 = 0.01;

/// [u] ≤ (2‖f‖/(Cλ))^{1/(p−1)} and ‖ξ‖_{p'}^{p'} ≤ (2Λ/λ)^{p'}‖f‖^{p'}, each
/// with 1% tolerance.
pub fn check_bounds(report: &SolveReport, params: &FracParams) -> BoundCheck {
    let pc = params.p_conj;
    let flux_norm_pow = report.flux_norm.powf(pc);
    let flux_bound_pow = report.flux_bound.powf(pc);
    BoundCheck {
        seminorm: report.seminorm,
        apriori_bound: report.apriori_bound,
        flux_norm_pow,
        flux_bound_pow,
        apriori_ok: report.seminorm <= (1.0 + BOUND_SLACK) * report.apriori_bound,
        flux_ok: flux_norm_pow <= (1.0 + BOUND_SLACK) * flux_bound_pow,
    }
}

/// Dense copy of the quadratic stiffness, exposed for diagnostics.
pub fn stiffness(op: &Operator) -> DMatrix<f64> {
    op.quadratic_stiffness()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fraccalc::GridSpec;
    use crate::kernels::{builtin, BuiltinParams, Family};
    use rand::Rng;

    fn disc(m: usize, s: f64, p: f64) -> Discretization {
        Discretization::new(
            GridSpec {
                interior: m,
                depth: 8,
                ..GridSpec::default()
            },
            FracParams::new(s, p).unwrap(),
        )
        .unwrap()
    }

    fn problem(d: &Discretization, family: Family, load: f64) -> DirichletProblem {
        let k = builtin(family, BuiltinParams::default()).unwrap();
        let f = DualVector::from_density(&d.grid, |_| load);
        DirichletProblem::new(d.clone(), k, f).unwrap()
    }

    #[test]
    fn zero_load_gives_zero_solution() {
        for p in [2.0, 3.0] {
            let d = disc(16, 0.5, p);
            let prob = problem(&d, Family::Checkerboard, 0.0);
            let r = solve(&prob, &SolveOptions::for_params(&d.params)).unwrap();
            assert!(r.solution.values.iter().all(|&v| v == 0.0));
            assert_eq!(r.energy, 0.0);
            assert_eq!((r.seminorm, r.apriori_bound), (0.0, 0.0));
        }
    }

    #[test]
    fn linear_in_load_at_p2() {
        let d = disc(32, 0.5, 2.0);
        let opts = SolveOptions::for_params(&d.params);
        let a = solve(&problem(&d, Family::SeparableCosine, std::f64::consts::PI), &opts).unwrap();
        let b = solve(&problem(&d, Family::SeparableCosine, 2.0 * std::f64::consts::PI), &opts).unwrap();
        for (x, y) in a.solution.values.iter().zip(&b.solution.values) {
            assert!((2.0 * x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn descent_converges_with_monotone_energy() {
        for (s, p) in [(0.5, 3.0), (0.7, 1.5), (0.3, 2.5)] {
            let d = disc(32, s, p);
            let prob = problem(&d, Family::RadialBump, 1.0);
            let opts = SolveOptions::for_params(&d.params);
            let r = solve(&prob, &opts).unwrap();
            assert!(r.residual <= opts.tol, "{s} {p}: {}", r.residual);
            for w in r.energy_history.windows(2) {
                assert!(w[1] <= w[0] + 1e-14 * w[0].abs());
            }
            let bc = check_bounds(&r, &d.params);
            assert!(bc.passed(), "{bc:?}");
        }
    }

    #[test]
    fn descent_agrees_with_direct_at_p2() {
        let d = disc(32, 0.4, 2.0);
        let prob = problem(&d, Family::Checkerboard, 1.0);
        let direct = solve(&prob, &SolveOptions::for_params(&d.params)).unwrap();
        let opts = SolveOptions {
            method: Method::Descent,
            initial: Some(d.grid.zeros()),
            ..SolveOptions::for_params(&d.params)
        };
        let desc = solve(&prob, &opts).unwrap();
        let diff = direct.solution.axpy(-1.0, &desc.solution).max_abs();
        assert!(diff <= 10.0 * opts.tol, "{diff}");
    }

    #[test]
    fn minimizer_check_detects_perturbation() {
        let d = disc(32, 0.5, 2.0);
        let prob = problem(&d, Family::Constant, 1.0);
        let opts = SolveOptions::for_params(&d.params);
        let r = solve(&prob, &opts).unwrap();
        let op = Operator::assemble(&d, &prob.kernel).unwrap();
        assert!(verify_minimizer(&d, &op, &prob.load, &r.solution, opts.tol, 20, 1).unwrap().passed);
        let h = d.grid.spacing();
        let bumped = r.solution.axpy(0.1, &d.grid.interpolate(|x| (1.0 - x.abs() / h).max(0.0)));
        assert!(!verify_minimizer(&d, &op, &prob.load, &bumped, opts.tol, 20, 1).unwrap().passed);
        let zero = DualVector::zeros(32);
        assert!(verify_minimizer(&d, &op, &zero, &d.grid.zeros(), opts.tol, 10, 2).unwrap().passed);
    }

    #[test]
    fn uniqueness_from_random_starts() {
        let d = disc(32, 0.5, 3.0);
        let prob = problem(&d, Family::Constant, std::f64::consts::PI);
        let op = Operator::assemble(&d, &prob.kernel).unwrap();
        let opts = SolveOptions::for_params(&d.params);
        let r = uniqueness_probe(&d, &op, &prob.load, &opts, 4, 7).unwrap();
        assert!(r.max_distance <= 1e-4, "{}", r.max_distance);
        let zero = DualVector::zeros(32);
        let r0 = uniqueness_probe(&d, &op, &zero, &opts, 3, 7).unwrap();
        assert!(r0.solutions.iter().all(|u| u.max_abs() <= r0.threshold));
        assert!(uniqueness_probe(&d, &op, &zero, &opts, 1, 7).is_err());
    }

    #[test]
    fn simon_examples() {
        assert_eq!(simon_gap(1.3, 1.3, 3.0), (0.0, 0.0));
        assert_eq!(simon_gap(0.0, 0.0, 1.5), (0.0, 0.0));
        let (l, r) = simon_gap(2.5, -1.0, 2.0);
        assert!((l - 12.25).abs() < 1e-12 && (r - 12.25).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in [1.5, 3.0, 4.0] {
            for _ in 0..10_000 {
                let (a, b) = (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
                let (l, r) = simon_gap(a, b, p);
                assert!(l >= 0.0 && l - r >= -1e-12 * l.abs().max(1.0));
            }
        }
    }

    #[test]
    fn operator_is_monotone() {
        let d = disc(24, 0.5, 3.0);
        let k = builtin(Family::SeparableCosine, BuiltinParams::default()).unwrap();
        let op = Operator::assemble(&d, &k).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let u = random_smooth(&d.grid, &mut rng, 6);
            let v = random_smooth(&d.grid, &mut rng, 6);
            let (l, lower) = monotonicity_gap(&d, &op, &u, &v);
            assert!(l >= lower * (1.0 - 1e-12) && lower > 0.0);
        }
    }

    #[test]
    fn invalid_kernel_is_ill_posed() {
        let d = disc(16, 0.5, 2.0);
        let k = Kernel::from_fn("bad", 1.0, 2.0, |x, _| 1.5 + 0.1 * x).unwrap();
        let prob = DirichletProblem::new(d.clone(), k, DualVector::from_density(&d.grid, |_| 1.0)).unwrap();
        assert!(matches!(
            solve(&prob, &SolveOptions::for_params(&d.params)),
            Err(Error::IllPosed(_))
        ));
    }
}
