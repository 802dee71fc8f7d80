//! Study configuration files (TOML).
//!
//! ```toml
//! seed = 20110101
//! replications = 2000
//! n = 24
//!
//! [model]
//! x_min = 140.0
//! x_max = 425.0
//! target_p = 0.3333333333333333
//!
//! [[scenarios]]
//! name = "Bayesian"
//! truth = { kind = "bayesian_draw" }
//!
//! [[policies]]
//! name = "EWOC"
//! rule = { kind = "ewoc", omega = 0.25 }
//! ```
//!
//! Unknown keys are rejected everywhere.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::designs::{DesignContext, DesignPolicy, Rule, DEFAULT_DOSE_GRID_POINTS};
use crate::error::{DoseError, Result};
use crate::model::DoseSpace;
use crate::posterior::{Prior, QuadratureGrid, DEFAULT_RESOLUTION};
use crate::simulator::{NamedPolicy, RiskParams, ScenarioSpec, Truth};

/// Replications used when `full_scale = true`.
pub const FULL_SCALE_REPLICATIONS: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub x_min: f64,
    pub x_max: f64,
    pub target_p: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriorConfig {
    /// Uniform on `[0, p] x [x_min, x_max]`.
    #[default]
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NumericsConfig {
    /// Gauss-Legendre nodes per axis.
    #[serde(default = "default_resolution")]
    pub grid_resolution: usize,
    #[serde(default = "default_dose_points")]
    pub dose_points: usize,
}

fn default_resolution() -> usize {
    DEFAULT_RESOLUTION.0
}

fn default_dose_points() -> usize {
    DEFAULT_DOSE_GRID_POINTS
}

impl Default for NumericsConfig {
    fn default() -> Self {
        Self {
            grid_resolution: DEFAULT_RESOLUTION.0,
            dose_points: DEFAULT_DOSE_GRID_POINTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub truth: Truth,
    /// Overrides the study seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub name: String,
    pub rule: Rule,
    #[serde(default)]
    pub enforce_coherence: bool,
    /// Overrides the study replication count for this design.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replications: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudyConfig {
    pub seed: u64,
    pub replications: usize,
    /// Runs [`FULL_SCALE_REPLICATIONS`] instead of `replications`.
    #[serde(default)]
    pub full_scale: bool,
    /// Patients per trial.
    pub n: usize,
    /// Worker threads; 0 uses every core. Results do not depend on it.
    #[serde(default)]
    pub workers: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub model: ModelConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default)]
    pub risk: RiskParams,
    pub scenarios: Vec<ScenarioConfig>,
    pub policies: Vec<PolicyConfig>,
}

impl StudyConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: StudyConfig = toml::from_str(text).map_err(|e| DoseError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DoseError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("study config serializes")
    }

    pub fn space(&self) -> Result<DoseSpace> {
        DoseSpace::new(self.model.x_min, self.model.x_max)
    }

    pub fn validate(&self) -> Result<()> {
        let space = self.space()?;
        let p = self.model.target_p;
        if !(p > 0.0 && p < 1.0) {
            return Err(DoseError::invalid("model.target_p", "must lie in (0, 1)"));
        }
        if self.replications == 0 {
            return Err(DoseError::invalid("replications", "must be at least 1"));
        }
        if self.n == 0 {
            return Err(DoseError::invalid("n", "must be at least 1"));
        }
        if self.numerics.dose_points < 2 {
            return Err(DoseError::invalid("numerics.dose_points", "must be at least 2"));
        }
        for (name, v) in [("risk.omega", self.risk.omega), ("risk.gamma", self.risk.gamma)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(DoseError::invalid(name, format!("must lie in (0, 1), got {v}")));
            }
        }
        if self.scenarios.is_empty() {
            return Err(DoseError::invalid("scenarios", "at least one scenario is required"));
        }
        if self.policies.is_empty() {
            return Err(DoseError::invalid("policies", "at least one policy is required"));
        }
        for sc in self.scenario_specs() {
            sc.validate(&space)
                .map_err(|e| prefix(&format!("scenarios.{}", sc.name), e))?;
        }
        for pc in &self.policies {
            let field = format!("policies.{}", pc.name);
            pc.rule.validate(p).map_err(|e| prefix(&field, e))?;
            if pc.replications == Some(0) {
                return Err(DoseError::invalid(format!("{field}.replications"), "must be at least 1"));
            }
        }
        let mut names: Vec<&str> = self.policies.iter().map(|p| p.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(DoseError::invalid("policies", "policy names must be unique"));
        }
        Ok(())
    }

    pub fn effective_replications(&self) -> usize {
        if self.full_scale {
            FULL_SCALE_REPLICATIONS
        } else {
            self.replications
        }
    }

    pub fn prior(&self) -> Prior {
        match self.prior {
            PriorConfig::Uniform => Prior::Uniform,
        }
    }

    pub fn context(&self) -> Result<DesignContext> {
        let r = self.numerics.grid_resolution;
        let grid = QuadratureGrid::new(&self.prior(), self.model.target_p, self.space()?, (r, r))?;
        DesignContext::new(Arc::new(grid), self.prior(), self.numerics.dose_points)
    }

    pub fn scenario_specs(&self) -> Vec<ScenarioSpec> {
        self.scenarios
            .iter()
            .map(|s| ScenarioSpec {
                name: s.name.clone(),
                truth: s.truth,
                n: self.n,
                replications: self.effective_replications(),
                p: self.model.target_p,
                seed: s.seed.unwrap_or(self.seed),
            })
            .collect()
    }

    pub fn named_policies(&self) -> Vec<NamedPolicy> {
        self.policies
            .iter()
            .map(|pc| NamedPolicy {
                name: pc.name.clone(),
                policy: DesignPolicy {
                    rule: pc.rule,
                    enforce_coherence: pc.enforce_coherence,
                },
                replications: if self.full_scale { None } else { pc.replications },
            })
            .collect()
    }
}

fn prefix(path: &str, e: DoseError) -> DoseError {
    match e {
        DoseError::InvalidParameter { field, reason } => DoseError::InvalidParameter {
            field: format!("{path}.{field}"),
            reason,
        },
        other => other,
    }
}
