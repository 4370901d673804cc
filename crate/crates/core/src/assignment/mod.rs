//! Candidate-to-target matching and the training objective.

mod hungarian;
mod loss;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hungarian::hungarian;
pub use loss::{
    bce_loss, chamfer_frozen, chamfer_nn, dice_loss, inlier_patches, pair_cost, total_loss, CandidateView, ChamferNn,
    GtShape, LossBreakdown, LossGrads, LossInputs, LossOutput, LossPlan, PairCost, TargetView, EMPTY_CD_PENALTY,
    MEMBERSHIP_THRESHOLD, PROB_CLAMP,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AssignmentError {
    #[error("cost or loss term is not finite")]
    NonFinite,
    #[error("{0}")]
    Shape(String),
    #[error("ground-truth primitive {0} has a type the model cannot predict")]
    UnsupportedType(usize),
}

/// Weights of the matching cost and training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CostWeights {
    pub alpha1_pos: f64,
    pub alpha1_null: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub lambda: f64,
}

impl Default for CostWeights {
    fn default() -> Self {
        CostWeights { alpha1_pos: 0.05, alpha1_null: 0.01, alpha2: 0.125, alpha3: 1.0, lambda: 0.05 }
    }
}

impl CostWeights {
    pub fn validate(&self) -> Result<(), String> {
        let all = [self.alpha1_pos, self.alpha1_null, self.alpha2, self.alpha3, self.lambda];
        if all.iter().all(|w| w.is_finite() && *w >= 0.0) {
            Ok(())
        } else {
            Err(format!("cost weights must be finite and nonnegative: {self:?}"))
        }
    }
}

/// A partial one-to-one assignment between candidates and targets.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchResult {
    /// (candidate, target) pairs, ascending by candidate.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
    pub unmatched: Vec<usize>,
    /// Cost terms of each pair, aligned with `pairs` (filled by the loss).
    pub terms: Vec<PairCost>,
}
