//! TOML experiment configuration. Every field has a default, so a file only lists overrides.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::design::{OuterOptions, PenaltySpec};
use crate::error::{OedError, Result};
use crate::forward::{ScenarioConfig, TruthField};
use crate::oed::OedOptions;
use crate::prior::PriorSpec;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OedSpec {
    /// Training data samples n_d.
    pub n_d: usize,
    /// Trace probes n_tr.
    pub n_tr: usize,
    /// Fresh evaluation samples n'_d.
    pub n_eval: usize,
    /// Random comparison designs per budget.
    pub n_random: usize,
    /// Penalty weights γ, one optimal design each.
    pub gammas: Vec<f64>,
    pub epsilons: Vec<f64>,
}

impl Default for OedSpec {
    fn default() -> Self {
        Self {
            n_d: 5,
            n_tr: 20,
            n_eval: 50,
            n_random: 30,
            gammas: vec![0.008, 0.005],
            epsilons: PenaltySpec::default().epsilons,
        }
    }
}

impl OedSpec {
    pub fn penalty(&self, gamma: f64) -> PenaltySpec {
        PenaltySpec {
            gamma,
            epsilons: self.epsilons.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingSpec {
    /// Cells per side of the unit-square meshes in the parameter sweep.
    pub param_cells: Vec<usize>,
    /// Sensor counts of the sensor sweep.
    pub sensor_counts: Vec<usize>,
    /// Cells per side for the sensor sweep and the sensor count for the parameter sweep.
    pub sensor_sweep_cells: usize,
    pub param_sweep_sensors: usize,
    pub n_d: usize,
    pub n_tr: usize,
    /// Run only the ℓ¹ stage of the design optimization.
    pub l1_only: bool,
    pub gamma: f64,
}

impl Default for ScalingSpec {
    fn default() -> Self {
        Self {
            param_cells: vec![21, 32, 45, 70],
            sensor_counts: vec![10, 100, 250, 500],
            sensor_sweep_cells: 45,
            param_sweep_sensors: 100,
            n_d: 1,
            n_tr: 1,
            l1_only: true,
            gamma: 0.008,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub scenario: ScenarioConfig,
    pub prior: PriorSpec,
    pub truth: TruthField,
    pub oed: OedSpec,
    pub solver: SolverSpec,
    pub outer: OuterOptions,
    pub scaling: ScalingSpec,
}

/// Solver options that serialize (the mutation switch is not configurable).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverSpec {
    pub mode: crate::hessian::HessianMode,
    pub map_rtol: f64,
    pub map_max_newton: usize,
    pub gn_iterations: usize,
    pub hessian_rtol: f64,
    pub cg_maxiter: usize,
    pub parallel: bool,
}

impl Default for SolverSpec {
    fn default() -> Self {
        let o = OedOptions::default();
        Self {
            mode: o.mode,
            map_rtol: o.map.rtol,
            map_max_newton: o.map.max_newton,
            gn_iterations: o.map.gn_iterations,
            hessian_rtol: o.hessian_cg.rtol,
            cg_maxiter: o.hessian_cg.maxiter,
            parallel: o.parallel,
        }
    }
}

impl SolverSpec {
    pub fn oed_options(&self) -> OedOptions {
        let mut o = OedOptions {
            mode: self.mode,
            parallel: self.parallel,
            ..OedOptions::default()
        };
        o.map.rtol = self.map_rtol;
        o.map.max_newton = self.map_max_newton;
        o.map.gn_iterations = self.gn_iterations;
        o.map.cg_maxiter = self.cg_maxiter;
        o.hessian_cg.rtol = self.hessian_rtol;
        o.hessian_cg.maxiter = self.cg_maxiter;
        o
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 20240917,
            scenario: ScenarioConfig::default(),
            prior: PriorSpec::default(),
            truth: TruthField::AnisotropicBlobs,
            oed: OedSpec::default(),
            solver: SolverSpec::default(),
            outer: OuterOptions::default(),
            scaling: ScalingSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let c: Self = toml::from_str(s).map_err(|e| OedError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| OedError::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(OedError::Config(m.to_string()));
        if self.scenario.nx == 0 || self.scenario.ny == 0 {
            return bad("mesh needs at least one cell per direction");
        }
        if !(self.scenario.sigma > 0.0) {
            return bad("noise level sigma must be positive");
        }
        if self.oed.n_d == 0 || self.oed.n_tr == 0 || self.oed.n_eval == 0 {
            return bad("n_d, n_tr and n_eval must be positive");
        }
        if self.oed.gammas.iter().any(|g| !(*g >= 0.0)) {
            return bad("penalty weights must be nonnegative");
        }
        if self.oed.epsilons.iter().any(|e| !(*e > 0.0)) {
            return bad("continuation epsilons must be positive");
        }
        if !(self.outer.initial_weight > 0.0 && self.outer.initial_weight < 1.0) {
            return bad("initial weight must lie in (0, 1)");
        }
        if self.prior.anchors.is_empty() {
            return bad("prior needs at least one anchor");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrip() {
        let c = ExperimentConfig::default();
        let s = c.to_toml_string().unwrap();
        assert_eq!(ExperimentConfig::from_toml_str(&s).unwrap(), c);
    }

    #[test]
    fn partial_override() {
        let c = ExperimentConfig::from_toml_str("seed = 3\n[scenario]\nnx = 8\nny = 8\n[oed]\nn_d = 2\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.scenario.nx, 8);
        assert_eq!(c.scenario.sigma, 0.05);
        assert_eq!(c.oed.n_d, 2);
        assert_eq!(c.oed.n_tr, 20);
    }

    #[test]
    fn rejects_invalid() {
        assert!(ExperimentConfig::from_toml_str("[scenario]\nsigma = 0.0\n").is_err());
        assert!(ExperimentConfig::from_toml_str("bogus = [").is_err());
    }
}
