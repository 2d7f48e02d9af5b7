//! Up-and-Down design workbench.
//!
//! * [`dist`]: threshold distributions and the scenario registry.
//! * [`designs`]: walk engines (SU&D, BCD, KR, GU&D) and targets.
//! * [`chain_analytics`]: transition matrices, stationary profiles, convergence.
//! * [`estimators`]: averaging, isotonic and centered-isotonic estimation with intervals.
//! * [`bayes`]: CRM-style posteriors, CCD and hybrid allocation.
//! * [`simlab`]: seeded ensemble simulation and metrics.
//! * [`engine`]: a single allocation state machine over all policies.

pub mod bayes;
pub mod chain_analytics;
pub mod designs;
pub mod dist;
pub mod engine;
pub mod estimators;
pub mod simlab;
mod error;
mod numeric;

pub use designs::{BoundaryPolicy, DesignRule, Response, TreatmentGrid, WalkState};
pub use dist::ThresholdModel;
pub use engine::{Decision, Engine, Policy};
pub use estimators::{ChainData, EstimateOptions, EstimateWithCI, EstimatorKind, ResponseTable};
pub use error::{Error, Result};
