//! Energy functionals, their Legendre transforms, and the conjugate
//! criterion for Γ-convergence of a kernel sequence.

use std::f64::consts::PI;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fraccalc::{Discretization, Operator};
use crate::grid::{DiscreteFunction, DualVector};
use crate::kernels::Kernel;
use crate::solver::{solve_operator, SolveOptions};

/// v ↦ (1/(2p))∬ a|D_{s,p}v|^p on a fixed discretization.
#[derive(Debug, Clone)]
pub struct EnergyFunctional {
    pub disc: Discretization,
    pub kernel: Kernel,
    op: Arc<Operator>,
}

impl EnergyFunctional {
    pub fn new(disc: Discretization, kernel: Kernel) -> Result<Self> {
        let op = Arc::new(Operator::assemble(&disc, &kernel)?);
        Ok(EnergyFunctional { disc, kernel, op })
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn value(&self, v: &DiscreteFunction) -> f64 {
        self.op.energy(v)
    }

    /// ⟨f, v⟩ − J(v), the quantity maximized by the conjugate.
    pub fn fenchel_gap(&self, f: &DualVector, v: &DiscreteFunction) -> f64 {
        f.pairing(v) - self.value(v)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LegendreValue {
    /// J*(f) = ⟨f,u⟩ − J(u) at the minimizer.
    pub value: f64,
    /// (1/p')⟨f,u⟩.
    pub pairing_form: f64,
    pub defect: f64,
    pub solution: DiscreteFunction,
    pub residual: f64,
}

/// Solves L_a u = f and evaluates the conjugate both as ⟨f,u⟩ − J(u) and
/// as (1/p')⟨f,u⟩.
pub fn legendre(e: &EnergyFunctional, f: &DualVector, opts: &SolveOptions) -> Result<LegendreValue> {
    if f.values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("load has non-finite entries"));
    }
    let min = solve_operator(&e.disc, &e.op, f, opts)?;
    let u = min.solution;
    let fu = f.pairing(&u);
    let value = fu - e.value(&u);
    let pairing_form = fu / e.disc.params.p_conj;
    Ok(LegendreValue {
        value,
        pairing_form,
        defect: (value - pairing_form).abs(),
        solution: u,
        residual: min.residual,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FenchelCheck {
    pub probes: usize,
    pub violations: usize,
    /// max over probes of ⟨f,v⟩ − J(v) − J*(f); non-positive when no probe
    /// beats the conjugate.
    pub worst_excess: f64,
}

/// J*(f) ≥ ⟨f,v⟩ − J(v) for every probe, up to `slack`.
pub fn fenchel_check(
    e: &EnergyFunctional,
    f: &DualVector,
    conj: &LegendreValue,
    probes: &[DiscreteFunction],
    slack: f64,
) -> FenchelCheck {
    let mut worst = f64::NEG_INFINITY;
    let mut violations = 0;
    for v in probes {
        let excess = e.fenchel_gap(f, v) - conj.value;
        if excess > slack {
            violations += 1;
        }
        worst = worst.max(excess);
    }
    FenchelCheck {
        probes: probes.len(),
        violations,
        worst_excess: worst,
    }
}

/// Densities available by name for loads, scaled to Ω = (−L, L) through
/// t = x/L.
pub fn named_density(name: &str) -> Option<fn(f64) -> f64> {
    let f: fn(f64) -> f64 = match name {
        "one" => |_| 1.0,
        "pi" => |_| PI,
        "x" => |t| t,
        "x2" => |t| t * t,
        "x3" => |t| t * t * t,
        "cos_half_pi" => |t| (0.5 * PI * t).cos(),
        "sin_pi" => |t| (PI * t).sin(),
        "cos_3half_pi" => |t| (1.5 * PI * t).cos(),
        "sin_2pi" => |t| (2.0 * PI * t).sin(),
        "bump" => |t| (-8.0 * t * t).exp(),
        "cos_pi" => |t| (PI * t).cos(),
        _ => return None,
    };
    Some(f)
}

pub const DICTIONARY: [&str; 10] = [
    "one",
    "x",
    "x2",
    "x3",
    "cos_half_pi",
    "sin_pi",
    "cos_3half_pi",
    "sin_2pi",
    "bump",
    "cos_pi",
];

pub const DICTIONARY_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedLoad {
    pub id: String,
    pub load: DualVector,
}

/// Random smooth density Σ_k (a_k cos(kπt/2) + b_k sin(kπt))/k, k = 1..6.
fn random_density(rng: &mut ChaCha8Rng) -> impl Fn(f64) -> f64 {
    let coeffs: Vec<(f64, f64)> = (0..6)
        .map(|_| (rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
        .collect();
    move |t: f64| {
        coeffs
            .iter()
            .enumerate()
            .map(|(k, (a, b))| {
                let k = (k + 1) as f64;
                (a * (0.5 * k * PI * t).cos() + b * (k * PI * t).sin()) / k
            })
            .sum()
    }
}

/// The twelve dictionary loads: ten analytic densities and two random
/// draws from `seed`.
pub fn load_dictionary(disc: &Discretization, seed: u64) -> Vec<NamedLoad> {
    let grid = &disc.grid;
    let l = grid.half_width();
    let mut out: Vec<NamedLoad> = DICTIONARY
        .iter()
        .map(|&id| {
            let f = named_density(id).expect("dictionary names are registered");
            NamedLoad {
                id: id.to_string(),
                load: DualVector::from_density(grid, |x| f(x / l)),
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 1..=2 {
        let f = random_density(&mut rng);
        out.push(NamedLoad {
            id: format!("random_{k}"),
            load: DualVector::from_density(grid, |x| f(x / l)),
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaRow {
    pub load: String,
    pub n: Vec<u32>,
    pub conjugates: Vec<f64>,
    pub limit: f64,
    pub defects: Vec<f64>,
    /// Defect at n_max relative to |J_0*(f)|.
    pub relative_at_max: f64,
    pub decreasing: bool,
    pub passed: bool,
    /// Largest identity defect |J* − (1/p')⟨f,u⟩| among this row's solves.
    pub identity_defect: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GammaReport {
    pub rows: Vec<GammaRow>,
    pub tolerance: f64,
    pub passed: bool,
    pub verdict: String,
}

/// J_n*(f) along the sequence against J_0*(f) for every load. A load
/// passes when the defect at n_max is below `tolerance`·|J_0*(f)| and either
/// decreased over the last doubling or already sits at the solver floor.
pub fn gamma_diagnostic(
    sequence: &[(u32, EnergyFunctional)],
    limit: &EnergyFunctional,
    loads: &[NamedLoad],
    opts: &SolveOptions,
    tolerance: f64,
) -> Result<GammaReport> {
    if sequence.is_empty() {
        return Err(Error::invalid("empty energy sequence"));
    }
    let rows: Vec<GammaRow> = loads
        .par_iter()
        .map(|nl| -> Result<GammaRow> {
            let lim = legendre(limit, &nl.load, opts)?;
            let mut conjugates = Vec::with_capacity(sequence.len());
            let mut identity_defect = lim.defect;
            for (_, e) in sequence {
                let v = legendre(e, &nl.load, opts)?;
                identity_defect = identity_defect.max(v.defect);
                conjugates.push(v.value);
            }
            let defects: Vec<f64> = conjugates.iter().map(|c| (c - lim.value).abs()).collect();
            let last = *defects.last().unwrap();
            let scale = lim.value.abs();
            let floor = 10.0 * opts.tol * scale.max(1.0) + 1e-14;
            let decreasing = defects.len() < 2 || last < defects[defects.len() - 2] || last <= floor;
            let relative_at_max = if scale > 0.0 { last / scale } else { last };
            Ok(GammaRow {
                load: nl.id.clone(),
                n: sequence.iter().map(|(n, _)| *n).collect(),
                conjugates,
                limit: lim.value,
                passed: (last <= tolerance * scale || last <= floor) && decreasing,
                relative_at_max,
                defects,
                decreasing,
                identity_defect,
            })
        })
        .collect::<Result<_>>()?;
    let passed = rows.iter().all(|r| r.passed);
    let failing: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.load.as_str()).collect();
    let verdict = if passed {
        format!(
            "consistent with Γ-convergence on {} loads (conjugate defects below {:.1}% at n = {})",
            rows.len(),
            100.0 * tolerance,
            sequence.last().unwrap().0
        )
    } else {
        format!("not consistent with Γ-convergence: failing loads {}", failing.join(", "))
    };
    Ok(GammaReport {
        rows,
        tolerance,
        passed,
        verdict,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fraccalc::{FracParams, GridSpec};
    use crate::kernels::{builtin, BuiltinParams, Family};

    fn disc(p: f64) -> Discretization {
        Discretization::new(
            GridSpec {
                interior: 48,
                depth: 8,
                ..GridSpec::default()
            },
            FracParams::new(0.5, p).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn zero_load_has_zero_conjugate() {
        let d = disc(2.0);
        let e = EnergyFunctional::new(d.clone(), Kernel::constant(1.0).unwrap()).unwrap();
        let v = legendre(&e, &DualVector::zeros(d.interior()), &SolveOptions::for_params(&d.params)).unwrap();
        assert_eq!(v.value, 0.0);
        assert_eq!(v.solution.max_abs(), 0.0);
    }

    #[test]
    fn conjugate_homogeneity() {
        for p in [1.5, 2.0, 3.0] {
            let d = disc(p);
            let k = builtin(Family::SeparableCosine, BuiltinParams::default()).unwrap();
            let e = EnergyFunctional::new(d.clone(), k).unwrap();
            let opts = SolveOptions::for_params(&d.params);
            let f = DualVector::from_density(&d.grid, |x| 1.0 + x);
            let base = legendre(&e, &f, &opts).unwrap().value;
            for c in [-1.0, 2.0] {
                let v = legendre(&e, &f.scaled(c), &opts).unwrap().value;
                let expected = f64::abs(c).powf(d.params.p_conj) * base;
                assert!((v - expected).abs() <= 1e-6 * expected, "p={p} c={c}: {v} vs {expected}");
            }
        }
    }

    #[test]
    fn dictionary_is_deterministic() {
        let d = disc(2.0);
        let a = load_dictionary(&d, 7);
        let b = load_dictionary(&d, 7);
        assert_eq!(a.len(), 12);
        assert_eq!(a, b);
        assert_ne!(a[10].load, load_dictionary(&d, 8)[10].load);
    }

    #[test]
    fn constant_sequence_defects_vanish() {
        let d = disc(2.0);
        let k = Kernel::constant(1.2).unwrap();
        let e = EnergyFunctional::new(d.clone(), k).unwrap();
        let seq = vec![(1, e.clone()), (2, e.clone()), (4, e.clone())];
        let loads = load_dictionary(&d, 1);
        let rep = gamma_diagnostic(&seq, &e, &loads[..3], &SolveOptions::for_params(&d.params), 0.02).unwrap();
        assert!(rep.passed);
        for r in &rep.rows {
            assert!(r.defects.iter().all(|&x| x <= 1e-12 * r.limit.abs().max(1.0)));
        }
        assert!(rep.verdict.starts_with("consistent with Γ-convergence"));
    }
}
