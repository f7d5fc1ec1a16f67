//! Agent model validation and protocol synthesis.
//!
//! The pipeline runs model checks, computes the feasible reference set,
//! solves the regulator equations (with rank repair), builds the integrating
//! precompensator, assembles the compensated model and designs the state and
//! observer gains.

mod compensated;
mod model;
mod regulator;
mod synthesis;

pub use compensated::{build_precompensator, compensate, CompensatedModel, GainPair, Precompensator};
pub use model::{check_assumption1, check_detectable, check_stabilizable, AgentModel, Assumption1Report};
pub use regulator::{
    check_right_invertible_no_zero_at_one, compute_yr_basis, gamma_rank, rank_condition_holds, rank_repair_step,
    reference_distance, regulator_residuals, solve_regulator, RegulatorSolution,
};
pub use synthesis::{synthesize, SynthesisChecks, SynthesisResult};

use crate::numerics::{NumericsError, RankTolerance};
use serde::{Deserialize, Serialize};

/// Numerical thresholds used during synthesis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    /// Relative singular-value threshold for rank decisions.
    pub rank: RankTolerance,
    /// Least-squares residual below which a reference counts as reachable.
    pub membership: f64,
    /// Residual allowed on the regulator and compensated-model identities.
    pub residual: f64,
    /// Slack on the unit-disc eigenvalue bound for the agent matrix.
    pub assumption_slack: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { rank: RankTolerance::default(), membership: 1e-8, residual: 1e-9, assumption_slack: 1e-9 }
    }
}

impl Tolerances {
    pub fn with_rank(rank: RankTolerance) -> Self {
        Self { rank, ..Self::default() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PlantError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("agent matrix has an eigenvalue of modulus {worst_modulus} outside the closed unit disc")]
    Assumption1 { worst_modulus: f64 },
    #[error("(A, B) is not stabilizable: uncontrollable mode {mode}")]
    NotStabilizable { mode: num_complex::Complex64 },
    #[error("(A, C) is not detectable: unobservable mode {mode}")]
    NotDetectable { mode: num_complex::Complex64 },
    #[error("reference is not reachable as an equilibrium output: component {component} is off by {distance:e} from the feasible set")]
    InfeasibleReference { component: usize, distance: f64 },
    #[error("synthesis integrity check failed: {0}")]
    Integrity(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("protocol JSON: {0}")]
    Json(#[from] serde_json::Error),
}

impl PlantError {
    /// True for failures of the agent-model assumptions.
    pub fn is_model_assumption(&self) -> bool {
        matches!(
            self,
            PlantError::Assumption1 { .. } | PlantError::NotStabilizable { .. } | PlantError::NotDetectable { .. }
        )
    }
}

/// Max-abs entry, 0 for empty matrices.
pub(crate) fn max_abs(m: &crate::numerics::Mat) -> f64 {
    m.iter().fold(0.0, |acc, v| acc.max(v.abs()))
}
