use serde::{Deserialize, Serialize};
use updown_core::estimators::CiOption;
use updown_core::{BoundaryPolicy, Engine, EstimatorKind, Policy, TreatmentGrid};

use crate::error::ApiError;

/// Everything needed to start a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrialConfig {
    /// Design-scale dose levels, evenly spaced.
    pub levels: Vec<f64>,
    #[serde(default = "reflecting")]
    pub boundary: BoundaryPolicy,
    pub policy: Policy,
    /// Zero-based index of the first level.
    pub start_level: usize,
    /// Fixed sample size; the trial completes after this many responses.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_max: Option<usize>,
    /// Design-randomization seed; generated at creation when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// Default estimators for `/estimates`.
    #[serde(default = "default_estimators")]
    pub estimators: Vec<String>,
    #[serde(default = "default_ci")]
    pub ci: CiOption,
    /// Apply boundary imputation to averaging estimators.
    #[serde(default)]
    pub impute: bool,
}

fn reflecting() -> BoundaryPolicy {
    BoundaryPolicy::Reflecting
}

fn default_estimators() -> Vec<String> {
    vec!["cir".into()]
}

fn default_ci() -> CiOption {
    CiOption::Poisson
}

impl TrialConfig {
    pub fn grid(&self) -> Result<TreatmentGrid, ApiError> {
        TreatmentGrid::new(self.levels.clone(), self.boundary).map_err(ApiError::from_config)
    }

    /// Checks the configuration and builds a fresh engine. `seed` must be set.
    pub fn engine(&self) -> Result<Engine, ApiError> {
        let seed = self
            .seed
            .ok_or_else(|| ApiError::new(400, "invalid_config", "seed missing").with_field("seed"))?;
        if self.n_max == Some(0) {
            return Err(ApiError::new(400, "invalid_config", "n_max must be positive").with_field("n_max"));
        }
        for name in &self.estimators {
            parse_estimator(name, &self.policy).map_err(|e| e.with_field("estimators"))?;
        }
        let engine = Engine::new(self.policy.clone(), self.grid()?, self.start_level, seed).map_err(ApiError::from_config)?;
        Ok(engine)
    }
}

pub(crate) fn parse_estimator(name: &str, policy: &Policy) -> Result<EstimatorKind, ApiError> {
    let rule = match policy {
        Policy::UpDown { rule } | Policy::Bud { rule, .. } => Some(*rule),
        _ => None,
    };
    EstimatorKind::parse(name.trim(), rule)
        .ok_or_else(|| ApiError::bad_request(format!("unknown estimator `{name}`")).with_field("estimators"))
}
