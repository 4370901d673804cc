//! Two-pathway model: an encoder producing a shared feature bank, a point
//! decoder, proxy contextualization and three prediction heads, with
//! hand-written reverse-mode gradients, AdamW and checkpoints.

mod checkpoint;
mod gradcheck;
mod model;
pub mod tensor;
mod train;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::AssignmentError;

pub use checkpoint::{load_checkpoint, load_optimizer, optimizer_path, save_checkpoint, save_optimizer, CHECKPOINT_MAGIC};
pub use gradcheck::{gradcheck, relative_error, GradcheckOptions, GradcheckReport, LayerReport};
pub use model::{inlier_sets, ForwardOptions, ForwardOutput, Model, ParamGroup, Stage};
pub use train::{
    evaluate_shape, train_step, AdamW, OptimConfig, ShapeEval, ShapePlan, StepReport, TrainShape, GT_POINT_CAP,
};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("backward called on an output without a forward cache")]
    CacheMissing,
    #[error("non-finite loss in term `{term}`")]
    NonFiniteLoss { term: String },
    #[error("checkpoint format: {0}")]
    Format(String),
    #[error(transparent)]
    Assignment(#[from] AssignmentError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

/// Architecture sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Patch count.
    pub u: usize,
    /// Points per patch.
    pub j: usize,
    /// Proxy count.
    pub k: usize,
    /// Hidden width.
    pub d: usize,
    pub layers: usize,
    pub heads: usize,
    /// 5, or 2 for the plane-only variant.
    pub type_count: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { u: 32, j: 16, k: 8, d: 32, layers: 2, heads: 2, type_count: 5, seed: 0 }
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        ModelConfig { u: 512, j: 16, k: 40, d: 128, layers: 4, heads: 8, type_count: 5, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(NetworkError::Config(m.to_string()));
        if self.u == 0 || self.j == 0 || self.k == 0 || self.d == 0 || self.heads == 0 {
            return bad("sizes must be positive");
        }
        if self.d % self.heads != 0 {
            return bad("d must be divisible by heads");
        }
        if self.type_count != 5 && self.type_count != 2 {
            return bad("type_count must be 5 or 2");
        }
        Ok(())
    }

    pub fn plane_only(&self) -> bool {
        self.type_count == 2
    }
}
