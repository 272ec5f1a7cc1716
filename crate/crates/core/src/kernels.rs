//! Symmetric kernels a(x, y) with certified bounds λ ≤ a ≤ Λ.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

type Evaluator = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// A kernel evaluated lazily at quadrature points.
///
/// `far_field` is the value used for pairs with one point beyond the
/// truncation radius; it always lies in `[lower, upper]`.
#[derive(Clone)]
pub struct Kernel {
    eval: Evaluator,
    lower: f64,
    upper: f64,
    label: String,
    far_field: f64,
    frequency: u32,
    periodic: bool,
    constant: Option<f64>,
}

impl fmt::Debug for Kernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Kernel")
            .field("label", &self.label)
            .field("lower", &self.lower)
            .field("upper", &self.upper)
            .field("far_field", &self.far_field)
            .field("frequency", &self.frequency)
            .finish()
    }
}

fn check_bounds(lower: f64, upper: f64) -> Result<()> {
    if !(lower > 0.0 && lower.is_finite() && upper.is_finite() && upper >= lower) {
        return Err(Error::IllPosed(format!(
            "kernel bounds must satisfy 0 < λ ≤ Λ < ∞, got λ = {lower}, Λ = {upper}"
        )));
    }
    Ok(())
}

impl Kernel {
    /// User-defined kernel. The caller is responsible for the claimed bounds;
    /// [`validate_kernel`] checks them on a sample.
    pub fn from_fn(
        label: impl Into<String>,
        lower: f64,
        upper: f64,
        f: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Result<Self> {
        check_bounds(lower, upper)?;
        Ok(Kernel {
            eval: Arc::new(f),
            lower,
            upper,
            label: label.into(),
            far_field: 0.5 * (lower + upper),
            frequency: 0,
            periodic: false,
            constant: None,
        })
    }

    pub fn constant(c: f64) -> Result<Self> {
        check_bounds(c, c)?;
        Ok(Kernel {
            eval: Arc::new(move |_, _| c),
            lower: c,
            upper: c,
            label: format!("constant({c})"),
            far_field: c,
            frequency: 0,
            periodic: true,
            constant: Some(c),
        })
    }

    /// Marks the kernel as 1-periodic in each variable so it can be oscillated.
    pub fn periodic(mut self) -> Self {
        self.periodic = true;
        if self.frequency == 0 {
            self.frequency = 1;
        }
        self
    }

    pub fn with_far_field(mut self, value: f64) -> Result<Self> {
        if !(value >= self.lower && value <= self.upper) {
            return Err(Error::invalid(format!(
                "far-field value {value} outside [{}, {}]",
                self.lower, self.upper
            )));
        }
        self.far_field = value;
        Ok(self)
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }

    #[inline]
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        (self.eval)(x, y)
    }

    pub fn lower(&self) -> f64 {
        self.lower
    }

    pub fn upper(&self) -> f64 {
        self.upper
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn far_field(&self) -> f64 {
        self.far_field
    }

    /// Oscillations per unit length; 0 for kernels without a period.
    pub fn frequency(&self) -> u32 {
        self.frequency
    }

    pub fn is_periodic(&self) -> bool {
        self.periodic
    }

    pub fn constant_value(&self) -> Option<f64> {
        self.constant
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Constant,
    SeparableCosine,
    Checkerboard,
    RadialBump,
}

impl FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Family::Constant),
            "separable-cosine" => Ok(Family::SeparableCosine),
            "checkerboard" => Ok(Family::Checkerboard),
            "radial-bump" => Ok(Family::RadialBump),
            other => Err(Error::invalid(format!(
                "unknown kernel family '{other}' (expected constant, separable-cosine, checkerboard, radial-bump)"
            ))),
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Family::Constant => "constant",
            Family::SeparableCosine => "separable-cosine",
            Family::Checkerboard => "checkerboard",
            Family::RadialBump => "radial-bump",
        };
        f.write_str(s)
    }
}

/// Parameters of a builtin family: `value` is used by `constant`, the bounds
/// by the others.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BuiltinParams {
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Default for BuiltinParams {
    fn default() -> Self {
        BuiltinParams {
            value: 1.0,
            lower: 1.0,
            upper: 2.0,
        }
    }
}

/// Builds one of the builtin 1-periodic families.
pub fn builtin(family: Family, params: BuiltinParams) -> Result<Kernel> {
    let (lo, hi) = (params.lower, params.upper);
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let kernel = match family {
        Family::Constant => return Kernel::constant(params.value),
        Family::SeparableCosine => Kernel::from_fn(format!("separable-cosine({lo},{hi})"), lo, hi, move |x, y| {
            mid + half * (2.0 * PI * x).cos() * (2.0 * PI * y).cos()
        })?,
        Family::Checkerboard => Kernel::from_fn(format!("checkerboard({lo},{hi})"), lo, hi, move |x, y| {
            if (x.floor() + y.floor()).rem_euclid(2.0) == 0.0 {
                hi
            } else {
                lo
            }
        })?,
        Family::RadialBump => Kernel::from_fn(format!("radial-bump({lo},{hi})"), lo, hi, move |x, y| {
            let b = (PI * (x - y)).sin();
            lo + (hi - lo) * b * b
        })?,
    };
    Ok(kernel.periodic())
}

/// The kernel (x, y) ↦ a(n·x, n·y), with the bounds of `k`.
pub fn oscillate(k: &Kernel, n: u32) -> Result<Kernel> {
    if n == 0 {
        return Err(Error::invalid("oscillation index n must be at least 1"));
    }
    if k.constant.is_some() {
        return Ok(k.clone());
    }
    if !k.periodic {
        return Err(Error::invalid(format!("kernel '{}' is not periodic and cannot be oscillated", k.label)));
    }
    let base = k.eval.clone();
    let nf = n as f64;
    Ok(Kernel {
        eval: Arc::new(move |x, y| base(nf * x, nf * y)),
        lower: k.lower,
        upper: k.upper,
        label: format!("{}[n={n}]", k.label),
        far_field: k.far_field,
        frequency: k.frequency * n,
        periodic: true,
        constant: None,
    })
}

/// Refuses kernels that oscillate faster than `M/8` periods per unit length.
pub fn check_aliasing(k: &Kernel, interior: usize) -> Result<()> {
    let limit = interior / 8;
    if k.frequency as usize > limit {
        return Err(Error::Aliasing {
            n: k.frequency,
            limit,
            interior,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelReport {
    pub samples: usize,
    pub max_asymmetry: f64,
    pub min: f64,
    pub max: f64,
    pub passed: bool,
    /// Worst offending pair and the reason, when validation fails.
    pub violation: Option<(f64, f64, String)>,
}

impl KernelReport {
    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            Ok(self)
        } else {
            let (x, y, why) = self.violation.clone().unwrap_or((f64::NAN, f64::NAN, String::new()));
            Err(Error::IllPosed(format!("kernel validation failed at ({x}, {y}): {why}")))
        }
    }
}

pub const SYMMETRY_TOLERANCE: f64 = 1e-12;

/// Samples `k` on a symmetric tensor grid of about `samples` pairs over
/// [−extent, extent]² and checks symmetry and the claimed bounds.
pub fn validate_kernel(k: &Kernel, samples: usize, extent: f64) -> Result<KernelReport> {
    if samples < 100 {
        return Err(Error::invalid(format!("need at least 100 samples, got {samples}")));
    }
    if !(extent > 0.0 && extent.is_finite()) {
        return Err(Error::invalid("sampling extent must be positive"));
    }
    let mut m = (samples as f64).sqrt().ceil() as usize;
    if m % 2 == 0 {
        m += 1;
    }
    let pts: Vec<f64> = (0..m)
        .map(|i| -extent + 2.0 * extent * i as f64 / (m - 1) as f64)
        .collect();
    let mut report = KernelReport {
        samples: m * m,
        max_asymmetry: 0.0,
        min: f64::INFINITY,
        max: f64::NEG_INFINITY,
        passed: true,
        violation: None,
    };
    let mut worst_asym = (0.0, 0.0);
    let mut worst_bound: Option<(f64, f64, f64)> = None;
    for (i, &x) in pts.iter().enumerate() {
        for &y in &pts[i..] {
            let a = k.eval(x, y);
            let b = k.eval(y, x);
            if !(a.is_finite() && b.is_finite()) {
                report.passed = false;
                report.violation = Some((x, y, "non-finite value".into()));
                return Ok(report);
            }
            let asym = (a - b).abs();
            if asym > report.max_asymmetry {
                report.max_asymmetry = asym;
                worst_asym = (x, y);
            }
            for (v, px, py) in [(a, x, y), (b, y, x)] {
                report.min = report.min.min(v);
                report.max = report.max.max(v);
                let excess = (k.lower - v).max(v - k.upper);
                if excess > 0.0 && worst_bound.is_none_or(|w| excess > w.2) {
                    worst_bound = Some((px, py, excess));
                }
            }
        }
    }
    if report.max_asymmetry > SYMMETRY_TOLERANCE {
        report.passed = false;
        report.violation = Some((
            worst_asym.0,
            worst_asym.1,
            format!("asymmetry {:.3e}", report.max_asymmetry),
        ));
    } else if let Some((x, y, excess)) = worst_bound {
        report.passed = false;
        report.violation = Some((x, y, format!("bound violated by {excess:.3e}")));
    }
    Ok(report)
}

/// Kernel given by a symmetric table on a tensor grid, interpolated
/// bilinearly with coordinates clamped to the table range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelTable {
    pub coords: Vec<f64>,
    /// Row-major, `values[i * n + j] = a(coords[i], coords[j])`.
    pub values: Vec<f64>,
}

impl KernelTable {
    pub fn size(&self) -> usize {
        self.coords.len()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.coords.len() + j]
    }

    fn locate(&self, x: f64) -> (usize, f64) {
        let c = &self.coords;
        let n = c.len();
        if x <= c[0] {
            return (0, 0.0);
        }
        if x >= c[n - 1] {
            return (n - 2, 1.0);
        }
        let i = c.partition_point(|&v| v <= x).saturating_sub(1).min(n - 2);
        (i, (x - c[i]) / (c[i + 1] - c[i]))
    }

    fn bilinear(&self, x: f64, y: f64) -> f64 {
        let (i, tx) = self.locate(x);
        let (j, ty) = self.locate(y);
        let v00 = self.get(i, j);
        let v10 = self.get(i + 1, j);
        let v01 = self.get(i, j + 1);
        let v11 = self.get(i + 1, j + 1);
        (1.0 - tx) * ((1.0 - ty) * v00 + ty * v01) + tx * ((1.0 - ty) * v10 + ty * v11)
    }

    pub fn into_kernel(self, label: impl Into<String>) -> Result<Kernel> {
        let n = self.coords.len();
        if n < 2 || self.values.len() != n * n {
            return Err(Error::LengthMismatch(format!(
                "kernel table needs n ≥ 2 coordinates and n² values, got {n} and {}",
                self.values.len()
            )));
        }
        if !self.coords.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::invalid("kernel table coordinates must be strictly increasing"));
        }
        let lower = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let upper = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = self.values.iter().sum::<f64>() / self.values.len() as f64;
        let table = Arc::new(self);
        // a + b == b + a in floating point, so the average is exactly symmetric.
        let k = Kernel::from_fn(label, lower, upper, move |x, y| {
            0.5 * (table.bilinear(x, y) + table.bilinear(y, x))
        })?;
        k.with_far_field(mean.clamp(lower, upper))
    }
}
