//! Exact nearest-neighbor search over 3D points.
//!
//! Ties are broken toward the smallest point index, so results match a
//! brute-force scan exactly.

use std::collections::BinaryHeap;

use crate::geometry::Vec3;

/// Static kd-tree over a point set, stored as an implicit balanced tree.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Vec3>,
    order: Vec<usize>,
    dims: Vec<u8>,
}

impl KdTree {
    pub fn new(points: &[Vec3]) -> Self {
        let mut tree = KdTree { points: points.to_vec(), order: (0..points.len()).collect(), dims: vec![0; points.len()] };
        tree.build(0, points.len());
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    fn build(&mut self, lo: usize, hi: usize) {
        if hi - lo <= 1 {
            return;
        }
        let mut min = [f64::INFINITY; 3];
        let mut max = [f64::NEG_INFINITY; 3];
        for &i in &self.order[lo..hi] {
            for k in 0..3 {
                min[k] = min[k].min(self.points[i][k]);
                max[k] = max[k].max(self.points[i][k]);
            }
        }
        let dim = (0..3).max_by(|&a, &b| (max[a] - min[a]).total_cmp(&(max[b] - min[b]))).unwrap_or(0);
        let mid = (lo + hi) / 2;
        let pts = &self.points;
        self.order[lo..hi].select_nth_unstable_by(mid - lo, |&a, &b| pts[a][dim].total_cmp(&pts[b][dim]).then(a.cmp(&b)));
        self.dims[mid] = dim as u8;
        self.build(lo, mid);
        self.build(mid + 1, hi);
    }

    /// Index of the nearest point and its squared distance. `None` for an empty tree.
    pub fn nearest(&self, q: &Vec3) -> Option<(usize, f64)> {
        if self.points.is_empty() {
            return None;
        }
        let mut best = (usize::MAX, f64::INFINITY);
        self.nearest_in(q, 0, self.points.len(), &mut best);
        Some(best)
    }

    fn nearest_in(&self, q: &Vec3, lo: usize, hi: usize, best: &mut (usize, f64)) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let d = (p - q).norm_squared();
        if d < best.1 || (d == best.1 && idx < best.0) {
            *best = (idx, d);
        }
        if hi - lo == 1 {
            return;
        }
        let dim = self.dims[mid] as usize;
        let diff = q[dim] - p[dim];
        let (first, second) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.nearest_in(q, first.0, first.1, best);
        if diff * diff <= best.1 {
            self.nearest_in(q, second.0, second.1, best);
        }
    }

    /// The `k` nearest points as (index, squared distance), closest first.
    pub fn knn(&self, q: &Vec3, k: usize) -> Vec<(usize, f64)> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        self.knn_in(q, k, 0, self.points.len(), &mut heap);
        let mut out: Vec<(usize, f64)> = heap.into_iter().map(|c| (c.idx, c.dist)).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn knn_in(&self, q: &Vec3, k: usize, lo: usize, hi: usize, heap: &mut BinaryHeap<Candidate>) {
        if lo >= hi {
            return;
        }
        let mid = (lo + hi) / 2;
        let idx = self.order[mid];
        let p = &self.points[idx];
        let cand = Candidate { dist: (p - q).norm_squared(), idx };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().expect("heap is full") {
            heap.pop();
            heap.push(cand);
        }
        if hi - lo == 1 {
            return;
        }
        let dim = self.dims[mid] as usize;
        let diff = q[dim] - p[dim];
        let (first, second) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.knn_in(q, k, first.0, first.1, heap);
        let bound = heap.peek().map_or(f64::INFINITY, |c| c.dist);
        if heap.len() < k || diff * diff <= bound {
            self.knn_in(q, k, second.0, second.1, heap);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    dist: f64,
    idx: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.dist.total_cmp(&other.dist).then(self.idx.cmp(&other.idx))
    }
}

/// Brute-force nearest neighbor with the same tie-break rule as [`KdTree::nearest`].
pub fn brute_force_nearest(points: &[Vec3], q: &Vec3) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, p) in points.iter().enumerate() {
        let d = (p - q).norm_squared();
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((i, d));
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(n: usize, seed: u64) -> Vec<Vec3> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()
    }

    #[test]
    fn nearest_matches_brute_force() {
        let pts = cloud(2000, 1);
        let tree = KdTree::new(&pts);
        for q in cloud(500, 2) {
            assert_eq!(tree.nearest(&q), brute_force_nearest(&pts, &q));
        }
    }

    #[test]
    fn ties_prefer_smallest_index() {
        let pts = vec![Vec3::new(1.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 0.0), Vec3::new(0.0, 0.0, 0.0)];
        let tree = KdTree::new(&pts);
        assert_eq!(tree.nearest(&Vec3::new(0.5, 0.0, 0.0)).unwrap().0, 0);
        assert_eq!(tree.nearest(&Vec3::new(0.1, 0.0, 0.0)).unwrap().0, 1);
    }

    #[test]
    fn knn_matches_sorted_scan() {
        let pts = cloud(800, 3);
        let tree = KdTree::new(&pts);
        for q in cloud(50, 4) {
            let got = tree.knn(&q, 12);
            let mut all: Vec<(usize, f64)> = pts.iter().enumerate().map(|(i, p)| (i, (p - q).norm_squared())).collect();
            all.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            assert_eq!(got, all[..12].to_vec());
        }
    }
}
