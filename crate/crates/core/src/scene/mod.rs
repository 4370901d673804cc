//! Synthetic labeled shapes, partial scans, sensor noise and the LPC file format.

mod generate;
mod lpc;
mod partial;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BoundedPrimitive, PrimitiveType, Vec3};

pub use generate::{generate_shape, DEFAULT_POINT_COUNT, MIN_PRIMITIVE_SUPPORT};
pub use lpc::{read_lpc, read_scan, write_lpc, write_scan};
pub use partial::{add_noise, farthest_point_sample, make_partial, DEFAULT_TARGET_COUNT};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid shape spec: {0}")]
    InvalidSpec(String),
    #[error("could not realize the requested primitive count in {attempts} attempts")]
    SpecInfeasible { attempts: usize },
    #[error("crop retains {retained} points, fewer than the requested {requested}")]
    TooFewPoints { retained: usize, requested: usize },
    #[error("line {line}: {message}")]
    ParseError { line: usize, message: String },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Composition statistics for the synthetic shape generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShapeSpec {
    /// Inclusive range of primitive counts.
    pub primitive_count_range: (usize, usize),
    /// Weights over plane, cylinder, sphere, cone.
    pub type_mix: [f64; 4],
    pub seed: u64,
    /// Number of surface points per shape.
    pub point_count: usize,
}

impl Default for ShapeSpec {
    fn default() -> Self {
        ShapeSpec {
            primitive_count_range: (2, 38),
            type_mix: [0.713, 0.252, 0.005, 0.030],
            seed: 0,
            point_count: DEFAULT_POINT_COUNT,
        }
    }
}

impl ShapeSpec {
    pub fn with_seed(&self, seed: u64) -> ShapeSpec {
        ShapeSpec { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let (lo, hi) = self.primitive_count_range;
        if lo < 2 || hi > 38 || lo > hi {
            return Err(SceneError::InvalidSpec(format!("count range [{lo}, {hi}] must lie within [2, 38]")));
        }
        if self.type_mix.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || self.type_mix.iter().sum::<f64>() <= 0.0 {
            return Err(SceneError::InvalidSpec("type weights must be nonnegative and not all zero".into()));
        }
        if self.point_count < MIN_PRIMITIVE_SUPPORT * hi {
            return Err(SceneError::InvalidSpec(format!("point_count {} is too small", self.point_count)));
        }
        Ok(())
    }
}

/// A complete shape: points with 1-based primitive labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledCloud {
    pub points: Vec<Vec3>,
    pub labels: Vec<usize>,
    /// Primitive `g` is stored at index `g - 1`.
    pub primitives: Vec<BoundedPrimitive>,
}

impl LabeledCloud {
    /// Builds a cloud, deriving each primitive's support and extent from the labels.
    pub fn from_labels(
        points: Vec<Vec3>,
        labels: Vec<usize>,
        quadrics: Vec<crate::geometry::Quadric>,
    ) -> Result<LabeledCloud, SceneError> {
        if points.len() != labels.len() {
            return Err(SceneError::InvariantViolation("points and labels differ in length".into()));
        }
        let mut support = vec![Vec::new(); quadrics.len()];
        for (p, &l) in points.iter().zip(&labels) {
            if l == 0 || l > quadrics.len() {
                return Err(SceneError::InvariantViolation(format!("label {l} references no primitive")));
            }
            support[l - 1].push(*p);
        }
        let primitives = quadrics
            .into_iter()
            .zip(support)
            .enumerate()
            .map(|(i, (q, s))| {
                BoundedPrimitive::new(q, s)
                    .ok_or_else(|| SceneError::InvariantViolation(format!("primitive {} has no supporting point", i + 1)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let cloud = LabeledCloud { points, labels, primitives };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same labels and types, with points and coefficients equal within `tol`.
    pub fn approx_eq(&self, other: &LabeledCloud, tol: f64) -> bool {
        self.labels == other.labels
            && self.points.len() == other.points.len()
            && self.primitives.len() == other.primitives.len()
            && self.points.iter().zip(&other.points).all(|(a, b)| (a - b).amax() <= tol)
            && self.primitives.iter().zip(&other.primitives).all(|(a, b)| {
                a.quadric.type_tag() == b.quadric.type_tag()
                    && a.quadric.coeffs().iter().zip(b.quadric.coeffs()).all(|(x, y)| (x - y).abs() <= tol)
            })
    }

    pub fn primitive_type(&self, g: usize) -> PrimitiveType {
        self.primitives[g - 1].quadric.type_tag()
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.points.is_empty() {
            return Err(SceneError::InvariantViolation("cloud has no points".into()));
        }
        if self.points.len() != self.labels.len() {
            return Err(SceneError::InvariantViolation("points and labels differ in length".into()));
        }
        if self.points.iter().any(|p| !p.iter().all(|v| v.is_finite())) {
            return Err(SceneError::InvariantViolation("non-finite coordinate".into()));
        }
        let mut counts = vec![0usize; self.primitives.len()];
        for &l in &self.labels {
            if l == 0 || l > counts.len() {
                return Err(SceneError::InvariantViolation(format!("label {l} references no primitive")));
            }
            counts[l - 1] += 1;
        }
        if let Some(g) = counts.iter().position(|&c| c == 0) {
            return Err(SceneError::InvariantViolation(format!("primitive {} has no supporting point", g + 1)));
        }
        if let Some(bp) = self.primitives.iter().find(|bp| bp.quadric.type_tag() == PrimitiveType::Null) {
            return Err(SceneError::InvariantViolation(format!("primitive of type null ({:?})", bp.quadric.coeffs())));
        }
        Ok(())
    }
}

/// Where a partial scan came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanSource {
    pub shape_id: String,
    pub ratio: f64,
    pub crop_seed: u64,
    pub noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartialScan {
    pub points: Vec<Vec3>,
    pub source: ScanSource,
}
