//! Candidate scoring, selection, projection refinement and primitive export.

use std::fs;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{canonicalize, project, PrimitiveType, Quadric, Vec3, QUADRATIC_BLOCK};
use crate::network::{inlier_sets, ForwardOutput};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
const CANONICAL_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("malformed export: {0}")]
    Format(String),
    #[error("export record {index}: {reason}")]
    Invalid { index: usize, reason: String },
}

pub type Result<T, E = InferenceError> = std::result::Result<T, E>;

/// One decoded proxy.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub probs: Vec<f64>,
    /// Most probable non-null class.
    pub ptype: PrimitiveType,
    pub membership: Vec<f64>,
    pub inliers: Vec<usize>,
    /// `None` when the predicted coefficients vanish.
    pub quadric: Option<Quadric>,
    pub score: f64,
    /// Points of the inlier patches.
    pub points: Vec<Vec3>,
}

/// Argmax over the non-null classes; ties go to the lower index.
pub fn predicted_class(probs: &[f64]) -> usize {
    (0..probs.len().saturating_sub(1)).fold(0, |best, c| if probs[c] > probs[best] { c } else { best })
}

/// Class probability of the predicted type times mean inlier membership;
/// zero for an empty inlier set.
pub fn score(probs: &[f64], membership: &[f64], inliers: &[usize]) -> f64 {
    if inliers.is_empty() {
        return 0.0;
    }
    let m = inliers.iter().map(|&u| membership[u]).sum::<f64>() / inliers.len() as f64;
    probs[predicted_class(probs)] * m
}

/// Decodes every proxy of a forward pass into a scored candidate.
pub fn candidates(out: &ForwardOutput, type_count: usize) -> Vec<Candidate> {
    let k = out.probs.rows;
    let u = out.membership.cols;
    let j = if u == 0 { 0 } else { out.points.len() / u };
    (0..k)
        .map(|i| {
            let probs = out.probs.row(i).to_vec();
            let membership = out.membership.row(i).to_vec();
            let ptype = PrimitiveType::from_class_index(predicted_class(&probs), type_count);
            let inliers = inlier_sets(&membership);
            let quadric = Quadric::with_type(out.theta[i], ptype).ok();
            let s = if quadric.is_some() { score(&probs, &membership, &inliers) } else { 0.0 };
            let points = inliers.iter().flat_map(|&p| out.points[p * j..(p + 1) * j].iter().copied()).collect();
            Candidate { index: i, probs, ptype, membership, inliers, quadric, score: s, points }
        })
        .collect()
}

/// Keeps candidates scoring at least `threshold`, in order.
pub fn select(cands: &[Candidate], threshold: f64) -> Vec<Candidate> {
    cands.iter().filter(|c| c.quadric.is_some() && c.score >= threshold).cloned().collect()
}

/// Projects inlier points onto the candidate's quadric, keeping a point where
/// projection fails. Returns the number of failures.
pub fn refine_project(c: &mut Candidate) -> usize {
    let Some(q) = c.quadric else { return c.points.len() };
    let mut failed = 0;
    for p in &mut c.points {
        match project(p, &q) {
            Ok(x) => *p = x,
            Err(_) => failed += 1,
        }
    }
    failed
}

/// One exported primitive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExportRecord {
    #[serde(rename = "type")]
    pub ptype: PrimitiveType,
    pub coeffs: [f64; 10],
    pub score: f64,
    pub inlier_patches: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub points: Option<Vec<[f64; 3]>>,
}

impl ExportRecord {
    pub fn from_candidate(c: &Candidate, with_points: bool) -> Option<Self> {
        let q = c.quadric?;
        Some(ExportRecord {
            ptype: c.ptype,
            coeffs: *q.coeffs(),
            score: c.score,
            inlier_patches: c.inliers.clone(),
            points: with_points.then(|| c.points.iter().map(|p| [p.x, p.y, p.z]).collect()),
        })
    }

    pub fn quadric(&self) -> Option<Quadric> {
        Quadric::with_type(self.coeffs, self.ptype).ok()
    }

    fn validate(&self, index: usize) -> Result<()> {
        let bad = |reason: &str| Err(InferenceError::Invalid { index, reason: reason.into() });
        if self.ptype == PrimitiveType::Null {
            return bad("null type is not geometry");
        }
        if !(0.0..=1.0).contains(&self.score) {
            return bad("score outside [0, 1]");
        }
        if self.coeffs.iter().chain(self.points.iter().flatten().flatten()).any(|v| !v.is_finite()) {
            return bad("non-finite value");
        }
        if self.ptype == PrimitiveType::Plane && QUADRATIC_BLOCK.iter().any(|&i| self.coeffs[i] != 0.0) {
            return bad("plane with quadratic terms");
        }
        match canonicalize(&self.coeffs) {
            Ok(c) if c.iter().zip(&self.coeffs).all(|(a, b)| (a - b).abs() <= CANONICAL_TOL) => Ok(()),
            _ => bad("coefficients not canonical"),
        }
    }
}

pub fn export_records(selected: &[Candidate], with_points: bool) -> Vec<ExportRecord> {
    selected.iter().filter_map(|c| ExportRecord::from_candidate(c, with_points)).collect()
}

pub fn write_export(path: &Path, records: &[ExportRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records).map_err(|e| InferenceError::Format(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

pub fn parse_export(text: &str) -> Result<Vec<ExportRecord>> {
    let records: Vec<ExportRecord> = serde_json::from_str(text).map_err(|e| InferenceError::Format(e.to_string()))?;
    for (i, r) in records.iter().enumerate() {
        r.validate(i)?;
    }
    Ok(records)
}

pub fn read_export(path: &Path) -> Result<Vec<ExportRecord>> {
    parse_export(&fs::read_to_string(path)?)
}
