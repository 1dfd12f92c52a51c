//! Experiment configuration: one JSON document selecting a scenario and the
//! inputs it needs, validated up front so failures name the offending field.

use serde::{Deserialize, Serialize};

use crate::coupling::SolveConfig;
use crate::dynamics::{Coefficients, TimeGrid};
use crate::error::{Error, Result};
use crate::system::ContinuumSystem;
use crate::torus::GridDensity;

use std::f64::consts::PI;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    DegenerateW1,
    PermutationZero,
    Compactness,
    Stability,
    RegularityCheck,
    CountingCheck,
    PdeParticleConsistency,
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::DegenerateW1 => "degenerate_w1",
            Scenario::PermutationZero => "permutation_zero",
            Scenario::Compactness => "compactness",
            Scenario::Stability => "stability",
            Scenario::RegularityCheck => "regularity_check",
            Scenario::CountingCheck => "counting_check",
            Scenario::PdeParticleConsistency => "pde_particle_consistency",
        }
    }
}

/// One class density 1 + a·cos(2π(x−phase)) + b·sin(2π(x−phase)), stored in
/// closed form so it can be discretized exactly at any resolution and
/// translated analytically.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarmonicDensity {
    #[serde(default)]
    pub cos_amp: f64,
    #[serde(default)]
    pub sin_amp: f64,
    #[serde(default)]
    pub phase: f64,
}

impl HarmonicDensity {
    pub fn validate(&self, path: &str) -> Result<()> {
        let amp = (self.cos_amp * self.cos_amp + self.sin_amp * self.sin_amp).sqrt();
        if !amp.is_finite() || amp > 1.0 {
            return Err(Error::Config(format!(
                "{path}: harmonic amplitude {amp:.3} exceeds 1, the density would go negative"
            )));
        }
        if !self.phase.is_finite() {
            return Err(Error::Config(format!("{path}: phase must be finite")));
        }
        Ok(())
    }

    /// Exact cell averages on a grid of `g` cells.
    pub fn discretize(&self, g: usize) -> Result<GridDensity> {
        let dx = 1.0 / g as f64;
        let values = (0..g)
            .map(|j| {
                let a = j as f64 * dx - self.phase;
                let b = a + dx;
                let cos_part = ((2.0 * PI * b).sin() - (2.0 * PI * a).sin()) / (2.0 * PI * dx);
                let sin_part = ((2.0 * PI * a).cos() - (2.0 * PI * b).cos()) / (2.0 * PI * dx);
                1.0 + self.cos_amp * cos_part + self.sin_amp * sin_part
            })
            .collect();
        GridDensity::new(values)
    }

    /// The same profile translated by `shift`.
    pub fn translated(&self, shift: f64) -> HarmonicDensity {
        HarmonicDensity {
            phase: self.phase + shift,
            ..*self
        }
    }
}

/// Closed-form continuum system: class weights, class kernel, one harmonic
/// density per class.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContinuumSpec {
    pub kappa: Vec<f64>,
    pub w: Vec<Vec<f64>>,
    pub grid_size: usize,
    pub densities: Vec<HarmonicDensity>,
}

impl ContinuumSpec {
    pub fn validate(&self) -> Result<()> {
        let k = self.kappa.len();
        if k == 0 {
            return Err(Error::Config("continuum.kappa: must be nonempty".into()));
        }
        if self.w.len() != k || self.w.iter().any(|row| row.len() != k) {
            return Err(Error::Config(format!(
                "continuum.w: expected a {k}x{k} matrix matching kappa"
            )));
        }
        if self.densities.len() != k {
            return Err(Error::Config(format!(
                "continuum.densities: expected {k} entries matching kappa, got {}",
                self.densities.len()
            )));
        }
        if self.grid_size == 0 {
            return Err(Error::Config("continuum.grid_size: must be positive".into()));
        }
        for (i, d) in self.densities.iter().enumerate() {
            d.validate(&format!("continuum.densities[{i}]"))?;
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.kappa.len()
    }

    /// Builds the system at its configured resolution.
    pub fn build(&self) -> Result<ContinuumSystem> {
        self.build_at(self.grid_size)
    }

    /// Builds the system at an explicit resolution (used by grid sweeps).
    pub fn build_at(&self, grid_size: usize) -> Result<ContinuumSystem> {
        let k = self.classes();
        let mut w = ndarray::Array2::zeros((k, k));
        for (i, row) in self.w.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                w[[i, j]] = v;
            }
        }
        let densities: Result<Vec<GridDensity>> = self
            .densities
            .iter()
            .map(|d| d.discretize(grid_size))
            .collect();
        ContinuumSystem::new(self.kappa.clone(), w, densities?)
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeGridSpec {
    pub dt: f64,
    pub t_end: f64,
}

impl TimeGridSpec {
    pub fn build(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.dt, self.t_end)
            .map_err(|e| Error::Config(format!("time_grid: {e}")))
    }
}

/// Bi-coupling solver budget used by scenarios that call the solver.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverSpec {
    #[serde(default = "default_solver_iters")]
    pub max_iter: usize,
    #[serde(default = "default_solver_tol")]
    pub tol: f64,
}

fn default_solver_iters() -> usize {
    2000
}

fn default_solver_tol() -> f64 {
    1e-6
}

impl Default for SolverSpec {
    fn default() -> Self {
        SolverSpec {
            max_iter: default_solver_iters(),
            tol: default_solver_tol(),
        }
    }
}

impl SolverSpec {
    pub fn to_solve_config(&self, seed: u64) -> SolveConfig {
        SolveConfig {
            max_iter: self.max_iter,
            tol: self.tol,
            seed,
            init: None,
        }
    }
}

/// The single JSON document driving `run` and `sweep`.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub scenario: Scenario,
    #[serde(default)]
    pub continuum: Option<ContinuumSpec>,
    #[serde(default)]
    pub coefficients: Option<Coefficients>,
    #[serde(default)]
    pub n_list: Vec<usize>,
    #[serde(default)]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub time_grid: Option<TimeGridSpec>,
    #[serde(default)]
    pub tree_cap: Option<usize>,
    #[serde(default)]
    pub grid_size: Option<usize>,
    #[serde(default)]
    pub trials: Option<usize>,
    #[serde(default)]
    pub realizations: Option<usize>,
    #[serde(default)]
    pub max_classes: Option<usize>,
    #[serde(default)]
    pub threshold: Option<f64>,
    #[serde(default)]
    pub solver: Option<SolverSpec>,
    #[serde(default)]
    pub out_dir: Option<String>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn solver_spec(&self) -> SolverSpec {
        self.solver.unwrap_or_default()
    }

    /// PDE resolution: explicit override or the continuum's native grid.
    pub fn effective_grid(&self) -> Option<usize> {
        self.grid_size
            .or_else(|| self.continuum.as_ref().map(|c| c.grid_size))
    }

    fn require_seeds(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config(
                "seeds: must list at least one explicit seed (no wall-clock seeding)".into(),
            ));
        }
        Ok(())
    }

    fn require_n_list(&self) -> Result<()> {
        if self.n_list.is_empty() {
            return Err(Error::Config("n_list: must list at least one size".into()));
        }
        if self.n_list.iter().any(|&n| n < 2) {
            return Err(Error::Config("n_list: sizes must be at least 2".into()));
        }
        Ok(())
    }

    fn require_continuum(&self) -> Result<&ContinuumSpec> {
        let spec = self
            .continuum
            .as_ref()
            .ok_or_else(|| Error::Config(format!(
                "continuum: required by scenario {}",
                self.scenario.name()
            )))?;
        spec.validate()?;
        Ok(spec)
    }

    fn require_divisible_sizes(&self, k: usize) -> Result<()> {
        for &n in &self.n_list {
            if n % k != 0 {
                return Err(Error::Config(format!(
                    "n_list: {n} is not divisible by the class count {k}, \
                     the quantile lift needs equal class blocks"
                )));
            }
        }
        Ok(())
    }

    fn require_dynamics(&self) -> Result<()> {
        let c = self.coefficients.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "coefficients: required by scenario {}",
                self.scenario.name()
            ))
        })?;
        c.validate()
            .map_err(|e| Error::Config(format!("coefficients: {e}")))?;
        let tg = self.time_grid.as_ref().ok_or_else(|| {
            Error::Config(format!(
                "time_grid: required by scenario {}",
                self.scenario.name()
            ))
        })?;
        tg.build()?;
        Ok(())
    }

    fn require_tree_cap(&self) -> Result<usize> {
        let cap = self.tree_cap.ok_or_else(|| {
            Error::Config(format!(
                "tree_cap: required by scenario {}",
                self.scenario.name()
            ))
        })?;
        if !(2..=6).contains(&cap) {
            return Err(Error::Config(format!(
                "tree_cap: must be between 2 and 6, got {cap}"
            )));
        }
        Ok(cap)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.trim().is_empty() {
            return Err(Error::Config("name: must be nonempty".into()));
        }
        match self.scenario {
            Scenario::DegenerateW1 | Scenario::PermutationZero => {
                self.require_n_list()?;
                self.require_seeds()?;
            }
            Scenario::Compactness => {
                self.require_n_list()?;
                self.require_seeds()?;
                let spec = self.require_continuum()?;
                self.require_divisible_sizes(spec.classes())?;
            }
            Scenario::Stability => {
                self.require_n_list()?;
                self.require_seeds()?;
                let spec = self.require_continuum()?;
                self.require_divisible_sizes(spec.classes())?;
                self.require_dynamics()?;
                self.require_tree_cap()?;
            }
            Scenario::RegularityCheck => {
                self.require_n_list()?;
                self.require_seeds()?;
                let k = self.max_classes.ok_or_else(|| {
                    Error::Config("max_classes: required by scenario regularity_check".into())
                })?;
                if k < 2 {
                    return Err(Error::Config(
                        "max_classes: at least 2 classes are needed".into(),
                    ));
                }
                if self.n_list.iter().any(|&n| n > 20) {
                    return Err(Error::Config(
                        "n_list: exact cut norms are limited to n <= 20".into(),
                    ));
                }
            }
            Scenario::CountingCheck => {
                self.require_n_list()?;
                self.require_seeds()?;
                if self.n_list.iter().any(|&n| n > 20) {
                    return Err(Error::Config(
                        "n_list: exact cut norms are limited to n <= 20".into(),
                    ));
                }
            }
            Scenario::PdeParticleConsistency => {
                self.require_n_list()?;
                self.require_seeds()?;
                let spec = self.require_continuum()?;
                self.require_divisible_sizes(spec.classes())?;
                self.require_dynamics()?;
                self.require_tree_cap()?;
                let c = self.coefficients.as_ref().unwrap();
                if c.nu != 0.0 {
                    return Err(Error::Config(
                        "coefficients.nu: the deterministic consistency scenario needs nu = 0 \
                         (use scenario stability for noisy runs)"
                            .into(),
                    ));
                }
            }
        }
        if let Some(t) = self.threshold {
            if !(t.is_finite() && t > 0.0) {
                return Err(Error::Config("threshold: must be a positive number".into()));
            }
        }
        if let Some(r) = self.realizations {
            if r == 0 {
                return Err(Error::Config("realizations: must be at least 1".into()));
            }
        }
        if let Some(tr) = self.trials {
            if tr == 0 {
                return Err(Error::Config("trials: must be at least 1".into()));
            }
        }
        if let Some(s) = &self.solver {
            if s.max_iter == 0 {
                return Err(Error::Config("solver.max_iter: must be at least 1".into()));
            }
            if !(s.tol.is_finite() && s.tol >= 0.0) {
                return Err(Error::Config("solver.tol: must be nonnegative".into()));
            }
        }
        Ok(())
    }
}
