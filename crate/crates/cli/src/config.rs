use std::path::{Path, PathBuf};

use nlhomog::fraccalc::{Discretization, FracParams, GridSpec};
use nlhomog::gamma::{named_density, DICTIONARY_VERSION};
use nlhomog::grid::DualVector;
use nlhomog::kernels::{builtin, validate_kernel, BuiltinParams, Family, Kernel};
use nlhomog::solver::{Method, SolveOptions};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Analytic reference for `solve`; only "getoor" is known.
    pub reference: Option<String>,
    pub domain: DomainConfig,
    pub fractional: FractionalConfig,
    pub kernel: KernelConfig,
    pub load: LoadConfig,
    pub sweep: SweepConfig,
    pub solver: SolverConfig,
    pub gamma: GammaConfig,
    pub output: OutputConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainConfig {
    pub half_width: f64,
    pub truncation_radius: f64,
    pub interior: usize,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FractionalConfig {
    pub s: f64,
    pub p: f64,
    pub normalization: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelConfig {
    pub family: String,
    /// Value of the constant family.
    pub value: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Either a named density (times `scale`) or nodal density values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoadConfig {
    pub density: String,
    pub scale: f64,
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub n: Vec<u32>,
    pub delta: f64,
    pub tau: f64,
    pub coarse: usize,
    pub probes: String,
    pub dictionary_version: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// Defaults to 1e−9 at p = 2 and 1e−7 otherwise.
    pub tol: Option<f64>,
    pub max_iter: usize,
    pub method: Method,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaConfig {
    /// "homogenized" (read effective_kernel.csv), "base" or "constant".
    pub limit: String,
    pub limit_value: f64,
    pub tolerance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 2024,
            reference: None,
            domain: DomainConfig::default(),
            fractional: FractionalConfig::default(),
            kernel: KernelConfig::default(),
            load: LoadConfig::default(),
            sweep: SweepConfig::default(),
            solver: SolverConfig::default(),
            gamma: GammaConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl Default for DomainConfig {
    fn default() -> Self {
        let g = GridSpec::default();
        DomainConfig {
            half_width: g.half_width,
            truncation_radius: g.truncation_radius,
            interior: g.interior,
            depth: g.depth,
        }
    }
}

impl Default for FractionalConfig {
    fn default() -> Self {
        FractionalConfig {
            s: 0.5,
            p: 2.0,
            normalization: 1.0,
        }
    }
}

impl Default for KernelConfig {
    fn default() -> Self {
        KernelConfig {
            family: "constant".into(),
            value: 1.0,
            lower: 1.0,
            upper: 2.0,
        }
    }
}

impl Default for LoadConfig {
    fn default() -> Self {
        LoadConfig {
            density: "pi".into(),
            scale: 1.0,
            values: None,
        }
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            n: vec![1, 2, 4, 8, 16, 32],
            delta: 0.25,
            tau: 1e-3,
            coarse: 32,
            probes: "standard".into(),
            dictionary_version: DICTIONARY_VERSION,
        }
    }
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            tol: None,
            max_iter: 5000,
            method: Method::Auto,
        }
    }
}

impl Default for GammaConfig {
    fn default() -> Self {
        GammaConfig {
            limit: "homogenized".into(),
            limit_value: 1.0,
            tolerance: 0.02,
        }
    }
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig { dir: "out".into() }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// SHA-256 of the canonical JSON form; the output directory is not part
    /// of the experiment and is excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        let canonical = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }

    pub fn frac_params(&self) -> Result<FracParams, CliError> {
        Ok(FracParams::new(self.fractional.s, self.fractional.p)?.with_normalization(self.fractional.normalization)?)
    }

    pub fn discretization(&self) -> Result<Discretization, CliError> {
        let params = self.frac_params()?;
        let d = &self.domain;
        Ok(Discretization::new(
            GridSpec {
                half_width: d.half_width,
                truncation_radius: d.truncation_radius,
                interior: d.interior,
                depth: d.depth,
            },
            params,
        )?)
    }

    pub fn kernel(&self) -> Result<Kernel, CliError> {
        let family: Family = self.kernel.family.parse()?;
        let k = builtin(
            family,
            BuiltinParams {
                value: self.kernel.value,
                lower: self.kernel.lower,
                upper: self.kernel.upper,
            },
        )?;
        validate_kernel(&k, 2500, self.domain.truncation_radius)?.into_result()?;
        Ok(k)
    }

    pub fn load_vector(&self, disc: &Discretization) -> Result<DualVector, CliError> {
        let grid = &disc.grid;
        let scale = self.load.scale;
        if !scale.is_finite() {
            return Err(CliError::Validation("load.scale must be finite".into()));
        }
        if let Some(values) = &self.load.values {
            if values.len() != disc.interior() {
                return Err(CliError::Validation(format!(
                    "load.values has {} entries, the grid has {} interior nodes",
                    values.len(),
                    disc.interior()
                )));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(CliError::Validation("load.values contains non-finite entries".into()));
            }
            let table = nlhomog::grid::DiscreteFunction::new(values.clone());
            return Ok(DualVector::from_density(grid, |x| scale * table.eval(grid, x)));
        }
        let f = named_density(&self.load.density)
            .ok_or_else(|| CliError::Validation(format!("unknown load density '{}'", self.load.density)))?;
        let l = grid.half_width();
        Ok(DualVector::from_density(grid, |x| scale * f(x / l)))
    }

    pub fn solve_options(&self, params: &FracParams) -> Result<SolveOptions, CliError> {
        let mut o = SolveOptions::for_params(params);
        if let Some(tol) = self.solver.tol {
            if !(tol > 0.0) {
                return Err(CliError::Validation(format!("solver.tol must be positive, got {tol}")));
            }
            o.tol = tol;
        }
        if self.solver.max_iter == 0 {
            return Err(CliError::Validation("solver.max_iter must be positive".into()));
        }
        o.max_iter = self.solver.max_iter;
        o.method = self.solver.method;
        Ok(o)
    }

    pub fn validate_sweep(&self) -> Result<(), CliError> {
        if self.sweep.probes != "standard" {
            return Err(CliError::Validation(format!(
                "unknown probe dictionary '{}' (only 'standard')",
                self.sweep.probes
            )));
        }
        if self.sweep.dictionary_version != DICTIONARY_VERSION {
            return Err(CliError::Validation(format!(
                "load dictionary version {} requested, this build provides {DICTIONARY_VERSION}",
                self.sweep.dictionary_version
            )));
        }
        Ok(())
    }

    pub fn validate_reference(&self) -> Result<(), CliError> {
        match self.reference.as_deref() {
            None | Some("getoor") => Ok(()),
            Some(other) => Err(CliError::Validation(format!("unknown reference '{other}' (only 'getoor')"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.fractional.p = 3.0;
        cfg.kernel.family = "checkerboard".into();
        cfg.sweep.n = vec![1, 2, 4];
        cfg.solver.tol = Some(1e-8);
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn missing_keys_take_defaults() {
        let cfg = ExperimentConfig::from_toml("[fractional]\np = 1.5\n").unwrap();
        assert_eq!(cfg.fractional.p, 1.5);
        assert_eq!(cfg.fractional.s, 0.5);
        assert_eq!(cfg.seed, 2024);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::from_toml("[domain]\nwidth = 2.0\n").is_err());
    }

    #[test]
    fn hash_ignores_output_dir_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output.dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
        b.seed += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn solver_tol_must_be_positive() {
        let mut cfg = ExperimentConfig::default();
        cfg.solver.tol = Some(0.0);
        let d = cfg.frac_params().unwrap();
        assert!(cfg.solve_options(&d).is_err());
    }
}
