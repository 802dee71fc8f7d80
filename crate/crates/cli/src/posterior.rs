//! `dosefind posterior`: summaries of the MTD posterior for a recorded history.
//!
//! ```toml
//! quantile_level = 0.25
//!
//! [model]
//! x_min = 140.0
//! x_max = 425.0
//! target_p = 0.3333333333333333
//!
//! [[observations]]
//! dose = 211.25
//! dlt = false
//! ```

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use dosefind::config::{ModelConfig, NumericsConfig, PriorConfig};
use dosefind::model::DoseSpace;
use dosefind::posterior::{GridPosterior, History, Observation, Prior, QuadratureGrid};
use dosefind::DoseError;
use dosefind_service::PosteriorSummary;
use serde::{Deserialize, Serialize};

use crate::{write_file, CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PosteriorInput {
    pub model: ModelConfig,
    #[serde(default)]
    pub prior: PriorConfig,
    #[serde(default)]
    pub numerics: NumericsConfig,
    #[serde(default = "default_level")]
    pub quantile_level: f64,
    #[serde(default)]
    pub observations: Vec<Observation>,
}

fn default_level() -> f64 {
    0.25
}

impl PosteriorInput {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| CliError::Engine(DoseError::Config(e.to_string())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn posterior(&self) -> Result<GridPosterior> {
        let p = self.model.target_p;
        if !(p > 0.0 && p < 1.0) {
            return Err(DoseError::invalid("model.target_p", "must lie in (0, 1)").into());
        }
        if !(self.quantile_level > 0.0 && self.quantile_level < 1.0) {
            return Err(DoseError::invalid("quantile_level", "must lie in (0, 1)").into());
        }
        let space = DoseSpace::new(self.model.x_min, self.model.x_max)?;
        let prior = match self.prior {
            PriorConfig::Uniform => Prior::Uniform,
        };
        let r = self.numerics.grid_resolution;
        let grid = Arc::new(QuadratureGrid::new(&prior, p, space, (r, r))?);
        let history = History {
            observations: self.observations.clone(),
        };
        GridPosterior::build(grid, &history).map_err(|e| match e {
            DoseError::InvalidParameter { field, reason } => DoseError::InvalidParameter {
                field: field.replacen("history", "observations", 1),
                reason,
            }
            .into(),
            other => other.into(),
        })
    }

    pub fn summarize(&self) -> Result<PosteriorSummary> {
        Ok(PosteriorSummary::of(&self.posterior()?, self.quantile_level))
    }
}

pub fn density_csv(summary: &PosteriorSummary) -> String {
    let mut out = String::from("eta,pdf\n");
    for (x, f) in summary.density.eta.iter().zip(&summary.density.pdf) {
        let _ = writeln!(out, "{x},{f}");
    }
    out
}

/// Prints the summary as JSON; with `out`, also writes `summary.json` and `density.csv` there.
pub fn cmd_posterior(path: &Path, out: Option<&Path>) -> Result<PosteriorSummary> {
    let summary = PosteriorInput::load(path)?.summarize()?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
        write_file(&dir.join("summary.json"), &json)?;
        write_file(&dir.join("density.csv"), &density_csv(&summary))?;
    }
    Ok(summary)
}
