//! Kernel sequences a_n(x, y) = a(nx, ny): weak limits of solutions and
//! fluxes, compensated products, and the effective kernel.

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fraccalc::{dual_norm, flux, sgrad, spow, Discretization, FracParams, Operator, PairField};
use crate::grid::{DiscreteFunction, DualVector, Grid};
use crate::kernels::{oscillate, Kernel, KernelTable};
use crate::solver::{check_bounds, finish_report, solve_operator, BoundCheck, SolveOptions, SolveReport};

type Probe1 = Arc<dyn Fn(f64) -> f64 + Send + Sync>;
type Probe2 = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// Fixed dictionary of smooth test functions on Ω and on Ω × Ω.
#[derive(Clone)]
pub struct ProbeSet {
    pub nodal: Vec<(String, Probe1)>,
    pub pair: Vec<(String, Probe2)>,
}

impl std::fmt::Debug for ProbeSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ProbeSet")
            .field("nodal", &self.nodal.iter().map(|p| &p.0).collect::<Vec<_>>())
            .field("pair", &self.pair.iter().map(|p| &p.0).collect::<Vec<_>>())
            .finish()
    }
}

/// C^∞ bump supported on (−1, 1).
pub fn bump(t: f64) -> f64 {
    if t.abs() >= 1.0 {
        0.0
    } else {
        (1.0 - 1.0 / (1.0 - t * t)).exp()
    }
}

impl ProbeSet {
    /// Eight nodal probes and four pair probes, scaled to Ω = (−L, L).
    pub fn standard(half_width: f64) -> Self {
        let l = half_width;
        let n1 = |name: &str, f: fn(f64) -> f64| -> (String, Probe1) {
            (name.to_string(), Arc::new(move |x: f64| f(x / l)))
        };
        let nodal = vec![
            n1("cos_half_pi", |t| (0.5 * PI * t).cos()),
            n1("sin_pi", |t| (PI * t).sin()),
            n1("cos_3half_pi", |t| (1.5 * PI * t).cos()),
            n1("sin_2pi", |t| (2.0 * PI * t).sin()),
            n1("x_cos_half_pi", |t| t * (0.5 * PI * t).cos()),
            n1("one_minus_x2", |t| 1.0 - t * t),
            n1("quartic", |t| (1.0 - t * t) * t * t),
            n1("gauss", |t| (-4.0 * t * t).exp()),
        ];
        let n2 = |name: &str, cx: f64, cy: f64, r: f64| -> (String, Probe2) {
            let (cx, cy, r) = (cx * l, cy * l, r * l);
            (
                name.to_string(),
                Arc::new(move |x: f64, y: f64| bump((x - cx) / r) * bump((y - cy) / r)),
            )
        };
        let pair = vec![
            n2("off_diag_a", -0.4, 0.3, 0.3),
            n2("off_diag_b", 0.45, -0.35, 0.3),
            n2("cross_diag_a", 0.15, -0.05, 0.45),
            n2("cross_diag_b", -0.2, 0.0, 0.6),
        ];
        ProbeSet { nodal, pair }
    }
}

/// Discrete Hann window of total width δ on a lattice of spacing h:
/// weights ∝ cos²(πkh/δ) for |kh| ≤ δ/2, summing to one.
pub fn hann_weights(h: f64, delta: f64) -> Result<Vec<f64>> {
    if !(delta >= 2.0 * h) {
        return Err(Error::invalid(format!("mollifier width δ = {delta} is below 2h = {}", 2.0 * h)));
    }
    let k = (0.5 * delta / h + 1e-9).floor() as i64;
    let raw: Vec<f64> = (-k..=k)
        .map(|j| (PI * j as f64 * h / delta).cos().powi(2))
        .collect();
    let total: f64 = raw.iter().sum();
    Ok(raw.iter().map(|w| w / total).collect())
}

/// F(ω)/F(0) for the continuous Hann window of total width δ.
pub fn hann_attenuation(omega: f64, delta: f64) -> f64 {
    let z = 0.5 * omega * delta;
    if z.abs() < 1e-12 {
        return 1.0;
    }
    let q = z / PI;
    if (q.abs() - 1.0).abs() < 1e-12 {
        return 0.5;
    }
    (z.sin() / z) / (1.0 - q * q)
}

/// Values on a uniform 1-D lattice; zero outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice1 {
    pub origin: f64,
    pub spacing: f64,
    pub values: Vec<f64>,
}

impl Lattice1 {
    /// Nodal values of u on [−L, L], boundary zeros included.
    pub fn from_function(grid: &Grid, u: &DiscreteFunction) -> Self {
        let mut values = Vec::with_capacity(u.len() + 2);
        values.push(0.0);
        values.extend_from_slice(&u.values);
        values.push(0.0);
        Lattice1 {
            origin: -grid.half_width(),
            spacing: grid.spacing(),
            values,
        }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let t = (x - self.origin) / self.spacing;
        let n = self.values.len();
        if t < 0.0 || t > (n - 1) as f64 {
            return 0.0;
        }
        let i = (t.floor() as usize).min(n - 2);
        let f = t - i as f64;
        self.values[i] * (1.0 - f) + self.values[i + 1] * f
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

/// Values on a uniform square lattice, row-major; zero outside.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lattice2 {
    pub origin: f64,
    pub spacing: f64,
    pub n: usize,
    pub values: Vec<f64>,
}

impl Lattice2 {
    /// Cell averages of a pair field over Ω × Ω, located at cell midpoints.
    pub fn from_pair_field(disc: &Discretization, field: &PairField) -> Self {
        let n = disc.grid.omega_cells().len();
        Lattice2 {
            origin: -disc.grid.half_width() + 0.5 * disc.grid.spacing(),
            spacing: disc.grid.spacing(),
            n,
            values: field.cell_averages(disc),
        }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Keeps the entries with x > y and zeroes the rest.
    pub fn lower_half(mut self) -> Self {
        let n = self.n;
        for i in 0..n {
            for j in i..n {
                self.values[i * n + j] = 0.0;
            }
        }
        self
    }

    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let tx = (x - self.origin) / self.spacing;
        let ty = (y - self.origin) / self.spacing;
        let last = (self.n - 1) as f64;
        if tx < 0.0 || ty < 0.0 || tx > last || ty > last {
            return 0.0;
        }
        let i = (tx.floor() as usize).min(self.n - 2);
        let j = (ty.floor() as usize).min(self.n - 2);
        let (fx, fy) = (tx - i as f64, ty - j as f64);
        (1.0 - fx) * ((1.0 - fy) * self.get(i, j) + fy * self.get(i, j + 1))
            + fx * ((1.0 - fy) * self.get(i + 1, j) + fy * self.get(i + 1, j + 1))
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }
}

fn convolve(values: &[f64], w: &[f64]) -> Vec<f64> {
    let k = w.len() / 2;
    let n = values.len();
    let mut out = vec![0.0; n + 2 * k];
    for (i, &v) in values.iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        for (j, &wj) in w.iter().enumerate() {
            out[i + j] += wj * v;
        }
    }
    out
}

/// Convolution with the Hann window of width δ; the lattice grows by δ/2 on
/// each side so that sums (integrals against constants) are preserved.
pub fn mollify1(f: &Lattice1, delta: f64) -> Result<Lattice1> {
    let w = hann_weights(f.spacing, delta)?;
    let k = w.len() / 2;
    Ok(Lattice1 {
        origin: f.origin - k as f64 * f.spacing,
        spacing: f.spacing,
        values: convolve(&f.values, &w),
    })
}

/// Separable Hann mollification in both variables.
pub fn mollify2(f: &Lattice2, delta: f64) -> Result<Lattice2> {
    let w = hann_weights(f.spacing, delta)?;
    let k = w.len() / 2;
    let n = f.n;
    let nn = n + 2 * k;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| convolve(&f.values[i * n..(i + 1) * n], &w))
        .collect();
    let cols: Vec<Vec<f64>> = (0..nn)
        .into_par_iter()
        .map(|j| {
            let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
            convolve(&col, &w)
        })
        .collect();
    let mut values = vec![0.0; nn * nn];
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.iter().enumerate() {
            values[i * nn + j] = *v;
        }
    }
    Ok(Lattice2 {
        origin: f.origin - k as f64 * f.spacing,
        spacing: f.spacing,
        n: nn,
        values,
    })
}

/// x_∞ from the last three terms by Aitken's Δ²; falls back to the last
/// term when the differences do not contract.
pub fn aitken(a: f64, b: f64, c: f64) -> f64 {
    let d1 = b - a;
    let d2 = c - b;
    let den = d2 - d1;
    if den.abs() <= 1e-300 || d2 == 0.0 || (d2 / d1).abs() >= 1.0 || !(d2 / d1).is_finite() {
        return c;
    }
    c - d2 * d2 / den
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLimitEstimate {
    pub probe: String,
    pub n: Vec<u32>,
    pub values: Vec<f64>,
    pub extrapolated: f64,
    /// |v_{k+1} − v_k| along the sequence.
    pub cauchy: Vec<f64>,
    /// Cauchy defects non-increasing over the last three entries.
    pub tail_monotone: bool,
}

impl WeakLimitEstimate {
    pub fn new(probe: impl Into<String>, n: Vec<u32>, values: Vec<f64>) -> Self {
        let cauchy: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        let k = values.len();
        let extrapolated = if k >= 3 {
            aitken(values[k - 3], values[k - 2], values[k - 1])
        } else {
            values.last().copied().unwrap_or(f64::NAN)
        };
        let tail = &cauchy[cauchy.len().saturating_sub(3)..];
        let tail_monotone = tail.windows(2).all(|w| w[1] <= w[0]);
        WeakLimitEstimate {
            probe: probe.into(),
            n,
            values,
            extrapolated,
            cauchy,
            tail_monotone,
        }
    }

    /// |v_{k−1} − v_∞| / |v_k − v_∞| over the last doubling, with v_∞ the
    /// Aitken limit of the last three terms. Algebraically this is the ratio
    /// of the last two increments, which stays meaningful when the
    /// increments do not contract and the extrapolation falls back.
    pub fn last_contraction(&self) -> f64 {
        let k = self.cauchy.len();
        if k < 2 {
            return f64::NAN;
        }
        let (a, b) = (self.cauchy[k - 2], self.cauchy[k - 1]);
        if b == 0.0 {
            if a == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            a / b
        }
    }

    /// Whether the last increments contract, so that Aitken's limit is used.
    pub fn extrapolation_reliable(&self) -> bool {
        let k = self.cauchy.len();
        k >= 2 && self.cauchy[k - 1] < self.cauchy[k - 2]
    }
}

/// Problem template for a kernel sequence.
#[derive(Debug, Clone)]
pub struct HomogRun {
    pub disc: Discretization,
    pub base: Kernel,
    pub n_list: Vec<u32>,
    pub load: DualVector,
    /// Mollifier width δ.
    pub delta: f64,
    /// Relative floor for the effective-kernel denominator.
    pub tau_rel: f64,
    /// Points per side of the coarse effective-kernel table.
    pub coarse: usize,
    pub opts: SolveOptions,
    pub probes: ProbeSet,
}

impl HomogRun {
    pub fn new(disc: Discretization, base: Kernel, n_list: Vec<u32>, load: DualVector, delta: f64) -> Result<Self> {
        let opts = SolveOptions::for_params(&disc.params);
        let probes = ProbeSet::standard(disc.grid.half_width());
        let run = HomogRun {
            disc,
            base,
            n_list,
            load,
            delta,
            tau_rel: 1e-3,
            coarse: 32,
            opts,
            probes,
        };
        run.validate()?;
        Ok(run)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_list.is_empty() {
            return Err(Error::invalid("empty n list"));
        }
        if !self.n_list.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("n list must be strictly increasing"));
        }
        let n_max = *self.n_list.last().unwrap();
        if self.base.constant_value().is_none() {
            crate::kernels::check_aliasing(&oscillate(&self.base, n_max)?, self.disc.interior())?;
        }
        let h = self.disc.grid.spacing();
        if !(self.delta >= 2.0 * h) {
            return Err(Error::invalid(format!("δ = {} is below 2h = {}", self.delta, 2.0 * h)));
        }
        if self.base.constant_value().is_none() && self.delta < 4.0 / n_max as f64 - 1e-12 {
            return Err(Error::invalid(format!(
                "δ = {} is below 4/n_max = {}; the window must span several periods",
                self.delta,
                4.0 / n_max as f64
            )));
        }
        if !(self.tau_rel > 0.0) {
            return Err(Error::invalid("denominator floor τ must be positive"));
        }
        if self.coarse < 2 {
            return Err(Error::invalid("coarse table needs at least 2 points per side"));
        }
        Ok(())
    }

    pub fn kernel(&self, n: u32) -> Result<Kernel> {
        oscillate(&self.base, n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub n: u32,
    pub report: Option<SolveReport>,
    pub error: Option<String>,
    pub nodal_pairings: Vec<f64>,
    pub flux_pairings: Vec<f64>,
    /// ∬ ξ_n D_{s,p}u_n Ψ for each pair probe.
    pub divcurl: Vec<f64>,
    pub bounds: Option<BoundCheck>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub dual_norm: f64,
    pub entries: Vec<SequenceEntry>,
    pub nodal: Vec<WeakLimitEstimate>,
    pub flux: Vec<WeakLimitEstimate>,
    pub divcurl: Vec<WeakLimitEstimate>,
    /// ∬ ξ̄ D_{s,p}ū Ψ with mollified terminal fields (product of weak limits).
    pub naive_divcurl: Vec<f64>,
}

impl SequenceResult {
    pub fn all_bounds_hold(&self) -> bool {
        self.entries.iter().all(|e| e.bounds.as_ref().is_some_and(|b| b.passed()))
    }

    pub fn terminal(&self) -> Option<&SolveReport> {
        self.entries.last().and_then(|e| e.report.as_ref())
    }
}

/// Solves L_n u_n = f along the sequence and records probe pairings.
/// A failed solve is recorded in its entry without aborting the sweep.
pub fn run_sequence(run: &HomogRun) -> Result<SequenceResult> {
    run.validate()?;
    let disc = &run.disc;
    let dn = dual_norm(disc, &run.load)?.value;
    let opts = SolveOptions {
        dual_norm: Some(dn),
        ..run.opts.clone()
    };
    let entries: Vec<SequenceEntry> = run
        .n_list
        .par_iter()
        .map(|&n| sequence_entry(run, n, &opts))
        .collect();

    let ok: Vec<&SequenceEntry> = entries.iter().filter(|e| e.report.is_some()).collect();
    let ns: Vec<u32> = ok.iter().map(|e| e.n).collect();
    let column = |pick: &dyn Fn(&SequenceEntry) -> &Vec<f64>, k: usize| ok.iter().map(|e| pick(e)[k]).collect::<Vec<_>>();
    let nodal = run
        .probes
        .nodal
        .iter()
        .enumerate()
        .map(|(k, (name, _))| WeakLimitEstimate::new(name.clone(), ns.clone(), column(&|e| &e.nodal_pairings, k)))
        .collect();
    let flux_est = run
        .probes
        .pair
        .iter()
        .enumerate()
        .map(|(k, (name, _))| WeakLimitEstimate::new(name.clone(), ns.clone(), column(&|e| &e.flux_pairings, k)))
        .collect();
    let divcurl = run
        .probes
        .pair
        .iter()
        .enumerate()
        .map(|(k, (name, _))| WeakLimitEstimate::new(name.clone(), ns.clone(), column(&|e| &e.divcurl, k)))
        .collect();

    let naive_divcurl = match ok.last().and_then(|e| e.report.as_ref()) {
        Some(rep) => {
            let kn = run.kernel(ok.last().unwrap().n)?;
            let xi = flux(disc, &kn, &rep.solution);
            naive_product(disc, &xi, &rep.solution, run.delta, &run.probes)?
        }
        None => vec![f64::NAN; run.probes.pair.len()],
    };

    Ok(SequenceResult {
        dual_norm: dn,
        entries,
        nodal,
        flux: flux_est,
        divcurl,
        naive_divcurl,
    })
}

fn sequence_entry(run: &HomogRun, n: u32, opts: &SolveOptions) -> SequenceEntry {
    let disc = &run.disc;
    let fail = |e: Error| SequenceEntry {
        n,
        report: None,
        error: Some(e.to_string()),
        nodal_pairings: vec![],
        flux_pairings: vec![],
        divcurl: vec![],
        bounds: None,
    };
    let kn = match run.kernel(n) {
        Ok(k) => k,
        Err(e) => return fail(e),
    };
    let op = match Operator::assemble(disc, &kn) {
        Ok(op) => op,
        Err(e) => return fail(e),
    };
    let min = match solve_operator(disc, &op, &run.load, opts) {
        Ok(m) => m,
        Err(e) => return fail(e),
    };
    let report = finish_report(disc, &kn, min, opts.dual_norm.unwrap_or(0.0), opts.tol);
    let u = &report.solution;
    let nodal_pairings = run.probes.nodal.iter().map(|(_, psi)| u.pair_with(&disc.grid, |x| psi(x))).collect();
    let xi = flux(disc, &kn, u);
    let flux_pairings = run
        .probes
        .pair
        .iter()
        .map(|(_, psi)| xi.integrate_against(disc, |x, y| psi(x, y)))
        .collect();
    let du = sgrad(disc, u);
    let divcurl = run
        .probes
        .pair
        .iter()
        .map(|(_, psi)| divcurl_integral(disc, &xi, &du, |x, y| psi(x, y)))
        .collect();
    let bounds = Some(check_bounds(&report, &disc.params));
    SequenceEntry {
        n,
        report: Some(report),
        error: None,
        nodal_pairings,
        flux_pairings,
        divcurl,
        bounds,
    }
}

/// ∬ φ · D_{s,p}v · Ψ.
pub fn divcurl_integral(disc: &Discretization, phi: &PairField, dv: &PairField, probe: impl Fn(f64, f64) -> f64 + Sync) -> f64 {
    let pts = disc.quad.points();
    crate::fraccalc::ordered_sum(pts.len(), |k| {
        pts[k].weight * phi.values[k] * dv.values[k] * probe(pts[k].x, pts[k].y)
    })
}

/// ∬ φ̄ D_{s,p}v̄ Ψ for mollified φ and v on the Ω × Ω midpoint lattice.
fn naive_product(
    disc: &Discretization,
    phi: &PairField,
    v: &DiscreteFunction,
    delta: f64,
    probes: &ProbeSet,
) -> Result<Vec<f64>> {
    let phi_bar = mollify2(&Lattice2::from_pair_field(disc, phi), delta)?;
    let v_bar = mollify1(&Lattice1::from_function(&disc.grid, v), delta)?;
    let alpha = disc.params.alpha();
    let h = disc.grid.spacing();
    let l = disc.grid.half_width();
    let n = disc.grid.omega_cells().len();
    let xs: Vec<f64> = (0..n).map(|i| -l + (i as f64 + 0.5) * h).collect();
    let vb: Vec<f64> = xs.iter().map(|&x| v_bar.eval(x)).collect();
    Ok(probes
        .pair
        .iter()
        .map(|(_, psi)| {
            let mut total = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let w = psi(xs[i], xs[j]);
                    if w == 0.0 {
                        continue;
                    }
                    let dvb = (vb[i] - vb[j]) / (xs[i] - xs[j]).abs().powf(alpha);
                    total += phi_bar.eval(xs[i], xs[j]) * dvb * w;
                }
            }
            total * h * h
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivCurlRow {
    pub n: u32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DivCurlReport {
    pub estimate: WeakLimitEstimate,
    pub defect_at_max: f64,
    pub contraction: f64,
    pub naive_product: f64,
    pub passed: bool,
}

/// I_n = ∬ φ_n D_{s,p}v_n Ψ along the sequences, its Aitken limit, and the
/// product of the mollified terminal fields for comparison.
pub fn divcurl_check(
    disc: &Discretization,
    n: &[u32],
    phis: &[PairField],
    vs: &[DiscreteFunction],
    probe: impl Fn(f64, f64) -> f64 + Sync + Send + Clone + 'static,
    delta: f64,
    tolerance: f64,
) -> Result<DivCurlReport> {
    if phis.len() != vs.len() || phis.len() != n.len() {
        return Err(Error::LengthMismatch(format!(
            "{} fields, {} functions, {} indices",
            phis.len(),
            vs.len(),
            n.len()
        )));
    }
    if phis.len() < 3 {
        return Err(Error::invalid("div-curl check needs at least 3 sequence members"));
    }
    let values: Vec<f64> = phis
        .iter()
        .zip(vs)
        .map(|(phi, v)| divcurl_integral(disc, phi, &sgrad(disc, v), probe.clone()))
        .collect();
    let estimate = WeakLimitEstimate::new("probe", n.to_vec(), values);
    let defect_at_max = (estimate.values.last().unwrap() - estimate.extrapolated).abs();
    let contraction = estimate.last_contraction();
    let probes = ProbeSet {
        nodal: vec![],
        pair: vec![("probe".into(), Arc::new(probe))],
    };
    let naive = naive_product(disc, phis.last().unwrap(), vs.last().unwrap(), delta, &probes)?[0];
    Ok(DivCurlReport {
        passed: defect_at_max <= tolerance,
        estimate,
        defect_at_max,
        contraction,
        naive_product: naive,
    })
}

/// Corrector data at one n: w_n solving L_n w_n = g and the mollified
/// terminal fields used by the effective-kernel estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectorEntry {
    pub n: u32,
    pub w: DiscreteFunction,
    pub seminorm: f64,
    pub apriori_bound: f64,
    pub w_bar: Lattice1,
    /// Mollified flux a_n|D w_n|^{p−2}D w_n, restricted to x > y.
    pub eta_bar: Lattice2,
    /// Mollified C|D w_n|^{p−2}D w_n, restricted to x > y.
    pub g_bar: Lattice2,
}

/// Solves L_n w_n = g for every n of the run and mollifies the results.
pub fn make_correctors(run: &HomogRun, g: &DualVector) -> Result<Vec<CorrectorEntry>> {
    correctors_by_n(run, g)?.into_iter().collect()
}

/// As `make_correctors`, keeping a failed solve as the entry for its n.
fn correctors_by_n(run: &HomogRun, g: &DualVector) -> Result<Vec<Result<CorrectorEntry>>> {
    run.validate()?;
    let disc = &run.disc;
    let dn = dual_norm(disc, g)?.value;
    Ok(run
        .n_list
        .par_iter()
        .map(|&n| {
            let kn = run.kernel(n)?;
            let op = Operator::assemble(disc, &kn)?;
            let min = solve_operator(disc, &op, g, &run.opts)?;
            let w = min.solution;
            let (apriori_bound, _) = crate::solver::bounds(&disc.params, kn.lower(), kn.upper(), dn);
            corrector_fields(disc, &kn, w, n, apriori_bound, run.delta)
        })
        .collect())
}

fn corrector_fields(
    disc: &Discretization,
    kernel: &Kernel,
    w: DiscreteFunction,
    n: u32,
    apriori_bound: f64,
    delta: f64,
) -> Result<CorrectorEntry> {
    let params = disc.params;
    let eta = flux(disc, kernel, &w);
    let mut g = sgrad(disc, &w);
    for v in g.values.iter_mut() {
        *v = params.normalization * spow(*v, params.p - 1.0);
    }
    Ok(CorrectorEntry {
        n,
        seminorm: crate::fraccalc::seminorm(disc, &w),
        apriori_bound,
        w_bar: mollify1(&Lattice1::from_function(&disc.grid, &w), delta)?,
        eta_bar: mollify2(&Lattice2::from_pair_field(disc, &eta).lower_half(), delta)?,
        g_bar: mollify2(&Lattice2::from_pair_field(disc, &g).lower_half(), delta)?,
        w,
    })
}

/// Estimated effective kernel on a coarse cell-centred grid over Ω × Ω.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectiveKernel {
    pub coords: Vec<f64>,
    /// Row-major; `None` outside the validity mask.
    pub values: Vec<Option<f64>>,
    pub denominators: Vec<f64>,
    pub floor: f64,
    pub lambda: f64,
    pub upper: f64,
    pub p: f64,
}

impl EffectiveKernel {
    pub fn size(&self) -> usize {
        self.coords.len()
    }

    /// (λ, Λ^{p'}/λ).
    pub fn corridor(&self) -> (f64, f64) {
        corridor(self.lambda, self.upper, self.p)
    }

    pub fn masked(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let k = self.size();
        self.values
            .iter()
            .enumerate()
            .filter_map(move |(idx, v)| v.map(|v| (idx / k, idx % k, v)))
    }

    pub fn mask_fraction(&self) -> f64 {
        self.values.iter().filter(|v| v.is_some()).count() as f64 / self.values.len() as f64
    }

    /// Kernel interpolating the table, with cells outside the mask filled by
    /// the nearest masked value (ties broken by scan order).
    pub fn to_kernel(&self) -> Result<Kernel> {
        let k = self.size();
        let masked: Vec<(usize, usize, f64)> = self.masked().collect();
        if masked.is_empty() {
            return Err(Error::EmptyMask { floor: self.floor });
        }
        let mut values = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                values[i * k + j] = match self.values[i * k + j] {
                    Some(v) => v,
                    None => {
                        let mut best = (usize::MAX, 0.0);
                        for &(a, b, v) in &masked {
                            let d = a.abs_diff(i).pow(2) + b.abs_diff(j).pow(2);
                            let d2 = a.abs_diff(j).pow(2) + b.abs_diff(i).pow(2);
                            let d = d.min(d2);
                            if d < best.0 {
                                best = (d, v);
                            }
                        }
                        best.1
                    }
                };
            }
        }
        // Make the fill symmetric as well.
        for i in 0..k {
            for j in i + 1..k {
                let v = 0.5 * (values[i * k + j] + values[j * k + i]);
                values[i * k + j] = v;
                values[j * k + i] = v;
            }
        }
        KernelTable {
            coords: self.coords.clone(),
            values,
        }
        .into_kernel("effective")
    }
}

pub fn corridor(lambda: f64, upper: f64, p: f64) -> (f64, f64) {
    let pc = p / (p - 1.0);
    (lambda, upper.powf(pc) / lambda)
}

/// a_0 = η̄ / ḡ on a `coarse` × `coarse` grid where |ḡ| ≥ τ·max|ḡ|.
///
/// Both numerator and denominator are mollifications of fields of the same
/// terminal corrector, so a constant kernel is recovered exactly.
pub fn estimate_effective_kernel(
    entry: &CorrectorEntry,
    params: &FracParams,
    half_width: f64,
    bounds: (f64, f64),
    tau_rel: f64,
    coarse: usize,
) -> Result<EffectiveKernel> {
    if !(tau_rel > 0.0) {
        return Err(Error::invalid("denominator floor τ must be positive"));
    }
    let l = half_width;
    let coords: Vec<f64> = (0..coarse)
        .map(|i| -l + (i as f64 + 0.5) * 2.0 * l / coarse as f64)
        .collect();
    let mut den = vec![0.0; coarse * coarse];
    let mut num = vec![0.0; coarse * coarse];
    for i in 0..coarse {
        for j in i..coarse {
            // The lattices hold the x > y half; the other half follows by
            // antisymmetry.
            let (x, y) = (coords[j], coords[i]);
            let g = entry.g_bar.eval(x, y);
            let e = entry.eta_bar.eval(x, y);
            den[j * coarse + i] = g;
            den[i * coarse + j] = -g;
            num[j * coarse + i] = e;
            num[i * coarse + j] = -e;
        }
    }
    let gmax = den.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = tau_rel * gmax;
    let mut values = vec![None; coarse * coarse];
    for i in 0..coarse {
        for j in i + 1..coarse {
            let g = den[i * coarse + j];
            if g.abs() >= floor && g != 0.0 {
                let a = num[i * coarse + j] / g;
                values[i * coarse + j] = Some(a);
                values[j * coarse + i] = Some(a);
            }
        }
    }
    if values.iter().all(|v| v.is_none()) {
        return Err(Error::EmptyMask { floor });
    }
    Ok(EffectiveKernel {
        coords,
        values,
        denominators: den,
        floor,
        lambda: bounds.0,
        upper: bounds.1,
        p: params.p,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorridorVerdict {
    pub passed: bool,
    pub lower: f64,
    pub upper: f64,
    pub tolerance: f64,
    pub min: f64,
    pub max: f64,
    /// Worst offending (x, y, a_0) when the check fails.
    pub worst: Option<(f64, f64, f64)>,
}

/// λ − tol ≤ a_0 ≤ Λ^{p'}/λ + tol on the mask, tol = `tol_frac` of the
/// corridor width (5% by default).
pub fn validate_corridor(eff: &EffectiveKernel, tol_frac: f64) -> Result<CorridorVerdict> {
    let (lo, hi) = eff.corridor();
    // Rounding margin keeps degenerate corridors (constant kernels) usable.
    let tol = tol_frac * (hi - lo) + 1e-12 * hi;
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    let mut worst: Option<(f64, f64, f64, f64)> = None;
    let mut any = false;
    for (i, j, v) in eff.masked() {
        any = true;
        min = min.min(v);
        max = max.max(v);
        let excess = (lo - tol - v).max(v - hi - tol);
        if excess > 0.0 && worst.is_none_or(|w| excess > w.3) {
            worst = Some((eff.coords[i], eff.coords[j], v, excess));
        }
    }
    if !any {
        return Err(Error::EmptyMask { floor: eff.floor });
    }
    Ok(CorridorVerdict {
        passed: worst.is_none(),
        lower: lo,
        upper: hi,
        tolerance: tol,
        min,
        max,
        worst: worst.map(|w| (w.0, w.1, w.2)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoop {
    /// max_k |⟨u_n − u_0, ψ_k⟩| over nodal probes.
    pub nodal_defect: f64,
    /// The same, divided by max_k |⟨u_0, ψ_k⟩|.
    pub nodal_relative: f64,
    /// max_k |∬ (ξ_n − ξ_0) Ψ_k| over pair probes.
    pub flux_defect: f64,
    pub flux_relative: f64,
    pub limit: SolveReport,
}

/// Solves L_{a_0}u_0 = f with the estimated kernel and compares probe
/// pairings of u_0 and its flux with those of the terminal sequence member.
pub fn closed_loop_check(
    run: &HomogRun,
    eff: &EffectiveKernel,
    terminal: &SequenceEntry,
    dual_norm_value: f64,
) -> Result<ClosedLoop> {
    let disc = &run.disc;
    let Some(rep) = terminal.report.as_ref() else {
        return Err(Error::invalid("terminal sequence member has no solution"));
    };
    let _ = rep;
    let k0 = eff.to_kernel()?;
    let op = Operator::assemble(disc, &k0)?;
    let min = solve_operator(disc, &op, &run.load, &run.opts)?;
    let limit = finish_report(disc, &k0, min, dual_norm_value, run.opts.tol);
    let u0 = &limit.solution;
    let xi0 = flux(disc, &k0, u0);
    let mut nodal_defect: f64 = 0.0;
    let mut nodal_scale: f64 = 0.0;
    for ((_, psi), un) in run.probes.nodal.iter().zip(&terminal.nodal_pairings) {
        let v0 = u0.pair_with(&disc.grid, |x| psi(x));
        nodal_defect = nodal_defect.max((un - v0).abs());
        nodal_scale = nodal_scale.max(v0.abs());
    }
    let mut flux_defect: f64 = 0.0;
    let mut flux_scale: f64 = 0.0;
    for ((_, psi), xn) in run.probes.pair.iter().zip(&terminal.flux_pairings) {
        let v0 = xi0.integrate_against(disc, |x, y| psi(x, y));
        flux_defect = flux_defect.max((xn - v0).abs());
        flux_scale = flux_scale.max(v0.abs());
    }
    Ok(ClosedLoop {
        nodal_defect,
        nodal_relative: if nodal_scale > 0.0 { nodal_defect / nodal_scale } else { nodal_defect },
        flux_defect,
        flux_relative: if flux_scale > 0.0 { flux_defect / flux_scale } else { flux_defect },
        limit,
    })
}

/// Default corrector loads: g¹ = L_{ā}(e^{−x²}) with ā the kernel's
/// far-field value, and g² ≡ 1.
pub fn corrector_loads(disc: &Discretization, base: &Kernel) -> Result<[(String, DualVector); 2]> {
    let k = Kernel::constant(base.far_field())?;
    let op = Operator::assemble(disc, &k)?;
    let w0 = disc.grid.interpolate(|x| (-x * x).exp());
    Ok([
        ("operator_of_gaussian".into(), op.apply(&w0)),
        ("one".into(), DualVector::from_density(&disc.grid, |_| 1.0)),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogStep {
    pub n: u32,
    pub effective: Option<EffectiveKernel>,
    pub corridor: Option<CorridorVerdict>,
    /// Max relative gap between the estimates from the two corrector loads
    /// on their joint mask.
    pub load_agreement: Option<f64>,
    pub closed_loop: Option<ClosedLoop>,
    pub corrector_bounds_ok: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomogReport {
    pub sequence: SequenceResult,
    pub steps: Vec<HomogStep>,
    pub corrector_loads: Vec<String>,
}

impl HomogReport {
    pub fn terminal_step(&self) -> Option<&HomogStep> {
        self.steps.last()
    }
}

/// Maximum relative difference between two estimates on their joint mask.
pub fn load_agreement(a: &EffectiveKernel, b: &EffectiveKernel) -> Option<f64> {
    let mut worst: Option<f64> = None;
    for (va, vb) in a.values.iter().zip(&b.values) {
        if let (Some(x), Some(y)) = (va, vb) {
            let d = (x - y).abs() / x.abs().max(y.abs());
            worst = Some(worst.map_or(d, |w: f64| w.max(d)));
        }
    }
    worst
}

/// Full pipeline: sequence solves, correctors for the two default loads,
/// effective kernel, corridor, load cross-validation and closed loop at
/// every n of the run.
pub fn homogenize(run: &HomogRun) -> Result<HomogReport> {
    let sequence = run_sequence(run)?;
    let loads = corrector_loads(&run.disc, &run.base)?;
    let c1 = correctors_by_n(run, &loads[0].1)?;
    let c2 = correctors_by_n(run, &loads[1].1)?;
    let bounds = (run.base.lower(), run.base.upper());
    let params = run.disc.params;
    let l = run.disc.grid.half_width();
    let steps = run
        .n_list
        .iter()
        .enumerate()
        .map(|(idx, &n)| {
            let failed = |error: String| HomogStep {
                n,
                effective: None,
                corridor: None,
                load_agreement: None,
                closed_loop: None,
                corrector_bounds_ok: false,
                error: Some(error),
            };
            let (w1, w2) = match (&c1[idx], &c2[idx]) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => return failed(format!("corrector: {e}")),
            };
            let attempt = || -> Result<HomogStep> {
                let e1 = estimate_effective_kernel(w1, &params, l, bounds, run.tau_rel, run.coarse)?;
                let e2 = estimate_effective_kernel(w2, &params, l, bounds, run.tau_rel, run.coarse)?;
                let corridor = validate_corridor(&e1, 0.05)?;
                let entry = &sequence.entries[idx];
                let closed_loop = if entry.report.is_some() {
                    Some(closed_loop_check(run, &e1, entry, sequence.dual_norm)?)
                } else {
                    None
                };
                Ok(HomogStep {
                    n,
                    load_agreement: load_agreement(&e1, &e2),
                    corridor: Some(corridor),
                    effective: Some(e1),
                    closed_loop,
                    corrector_bounds_ok: [w1, w2]
                        .iter()
                        .all(|c| c.seminorm <= (1.0 + crate::solver::BOUND_SLACK) * c.apriori_bound),
                    error: None,
                })
            };
            attempt().unwrap_or_else(|e| failed(e.to_string()))
        })
        .collect();
    Ok(HomogReport {
        sequence,
        steps,
        corrector_loads: loads.iter().map(|l| l.0.clone()).collect(),
    })
}
