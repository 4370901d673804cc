//! Online target induction: nearest-neighbor label transfer from ground truth
//! to predicted points, a majority vote per patch, and per-primitive patch sets.

use crate::geometry::Vec3;
use crate::scene::LabeledCloud;
use crate::spatial::KdTree;

/// Predicted points grouped into `u` patches of `j` points, stored flat.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchedPrediction {
    pub u: usize,
    pub j: usize,
    pub points: Vec<Vec3>,
}

impl PatchedPrediction {
    pub fn new(u: usize, j: usize, points: Vec<Vec3>) -> Self {
        assert!(u >= 1 && j >= 1 && points.len() == u * j, "expected {u}x{j} points, got {}", points.len());
        PatchedPrediction { u, j, points }
    }

    pub fn patch(&self, u: usize) -> &[Vec3] {
        &self.points[u * self.j..(u + 1) * self.j]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetAssignment {
    /// Label (1-based primitive id) of every predicted point, patch-major.
    pub point_labels: Vec<usize>,
    pub patch_labels: Vec<usize>,
    /// `target_sets[g - 1]` lists the patches (0-based, ascending) voting for primitive `g`.
    pub target_sets: Vec<Vec<usize>>,
}

/// Label of the nearest ground-truth point for every predicted point.
/// Ties go to the ground-truth point with the smallest index.
pub fn assign_point_labels(pred: &PatchedPrediction, gt: &LabeledCloud) -> Vec<usize> {
    let tree = KdTree::new(&gt.points);
    pred.points
        .iter()
        .map(|p| {
            let (i, _) = tree.nearest(p).expect("ground truth is non-empty");
            gt.labels[i]
        })
        .collect()
}

/// Most frequent label; ties go to the smallest label.
pub fn patch_majority(labels: &[usize]) -> usize {
    assert!(!labels.is_empty(), "empty patch");
    let mut sorted = labels.to_vec();
    sorted.sort_unstable();
    let mut best = (sorted[0], 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let run = sorted[i..].iter().take_while(|&&l| l == sorted[i]).count();
        if run > best.1 {
            best = (sorted[i], run);
        }
        i += run;
    }
    best.0
}

/// Groups patch indices by their label; primitives without patches get an empty set.
pub fn build_target_sets(patch_labels: &[usize], g: usize) -> Vec<Vec<usize>> {
    let mut sets = vec![Vec::new(); g];
    for (u, &l) in patch_labels.iter().enumerate() {
        assert!((1..=g).contains(&l), "patch label {l} outside 1..={g}");
        sets[l - 1].push(u);
    }
    sets
}

/// Full induction for one shape.
pub fn induce_targets(pred: &PatchedPrediction, gt: &LabeledCloud) -> TargetAssignment {
    let point_labels = assign_point_labels(pred, gt);
    let patch_labels: Vec<usize> = point_labels.chunks(pred.j).map(patch_majority).collect();
    let target_sets = build_target_sets(&patch_labels, gt.primitives.len());
    TargetAssignment { point_labels, patch_labels, target_sets }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Shape;

    fn two_point_gt() -> LabeledCloud {
        let q = Shape::Plane { normal: Vec3::z(), offset: 0.0 }.to_quadric();
        LabeledCloud::from_labels(vec![Vec3::zeros(), Vec3::x()], vec![1, 2], vec![q, q]).unwrap()
    }

    #[test]
    fn nearest_label_and_tie() {
        let gt = two_point_gt();
        let pred = PatchedPrediction::new(2, 1, vec![Vec3::new(0.1, 0.0, 0.0), Vec3::new(0.5, 0.0, 0.0)]);
        assert_eq!(assign_point_labels(&pred, &gt), vec![1, 1]);
    }

    #[test]
    fn majority_examples() {
        assert_eq!(patch_majority(&[1, 1, 2]), 1);
        assert_eq!(patch_majority(&[1, 2]), 1);
        assert_eq!(patch_majority(&[2, 1]), 1);
        assert_eq!(patch_majority(&[3, 3, 3, 3]), 3);
        assert_eq!(patch_majority(&[5, 2, 5, 2, 7]), 2);
    }

    #[test]
    fn target_set_examples() {
        assert_eq!(build_target_sets(&[1, 1, 2], 2), vec![vec![0, 1], vec![2]]);
        assert_eq!(build_target_sets(&[2, 2], 3), vec![vec![], vec![0, 1], vec![]]);
    }
}
