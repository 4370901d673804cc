//! Point-set metrics (Chamfer, Hausdorff, normal consistency, F-score) and
//! primitive-quality metrics over a Hungarian matching.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::assignment::{hungarian, MatchResult};
use crate::geometry::{sample_surface, BoundedPrimitive, PrimitiveType, Quadric, Vec3};
use crate::spatial::KdTree;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("metric needs two non-empty point sets")]
    EmptySet,
    #[error("normal {index} is not unit length")]
    NonUnitNormal { index: usize },
    #[error("matching is empty")]
    EmptyMatching,
}

pub type Result<T, E = MetricsError> = std::result::Result<T, E>;

pub const FSCORE_TAU: f64 = 0.01;
pub const COVER_EPS: f64 = 0.01;
pub const EVAL_SAMPLES: usize = 512;
const UNIT_TOL: f64 = 1e-6;

/// Distance from every point of `a` to its nearest neighbor in `b`.
fn nn_distances(a: &[Vec3], b: &[Vec3]) -> Vec<f64> {
    let tree = KdTree::new(b);
    a.iter().map(|p| tree.nearest(p).map_or(f64::INFINITY, |(_, d2)| d2.sqrt())).collect()
}

fn check(a: &[Vec3], b: &[Vec3]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        Err(MetricsError::EmptySet)
    } else {
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// L1 Chamfer distance: half the sum of both mean nearest-neighbor distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    check(a, b)?;
    Ok(0.5 * (mean(&nn_distances(a, b)) + mean(&nn_distances(b, a))))
}

pub fn hausdorff(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    check(a, b)?;
    let m = |v: Vec<f64>| v.into_iter().fold(0.0, f64::max);
    Ok(m(nn_distances(a, b)).max(m(nn_distances(b, a))))
}

/// Symmetric mean of |⟨n_a, n_nn(a)⟩| over nearest-neighbor pairs.
pub fn normal_consistency(pa: &[Vec3], na: &[Vec3], pb: &[Vec3], nb: &[Vec3]) -> Result<f64> {
    check(pa, pb)?;
    if pa.len() != na.len() || pb.len() != nb.len() {
        return Err(MetricsError::EmptySet);
    }
    for (index, n) in na.iter().chain(nb).enumerate() {
        if (n.norm() - 1.0).abs() > UNIT_TOL {
            return Err(MetricsError::NonUnitNormal { index });
        }
    }
    let one_way = |p: &[Vec3], n: &[Vec3], q: &[Vec3], m: &[Vec3]| {
        let tree = KdTree::new(q);
        let s: f64 = p.iter().zip(n).map(|(x, nx)| tree.nearest(x).map_or(0.0, |(j, _)| nx.dot(&m[j]).abs())).sum();
        s / p.len() as f64
    };
    Ok(0.5 * (one_way(pa, na, pb, nb) + one_way(pb, nb, pa, na)))
}

/// Harmonic mean of precision (share of `a` within `tau` of `b`) and recall.
pub fn fscore(a: &[Vec3], b: &[Vec3], tau: f64) -> Result<f64> {
    check(a, b)?;
    let share = |d: Vec<f64>| d.iter().filter(|&&x| x <= tau).count() as f64 / d.len() as f64;
    let (p, r) = (share(nn_distances(a, b)), share(nn_distances(b, a)));
    Ok(if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) })
}

/// A primitive as seen by evaluation: its type, quadric and surface samples.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalPrimitive {
    pub ptype: PrimitiveType,
    pub quadric: Quadric,
    pub points: Vec<Vec3>,
}

impl EvalPrimitive {
    /// Samples `n` points over the bounded surface; falls back to the support
    /// points when the quadric has no parametric form in its extent.
    pub fn sampled(ptype: PrimitiveType, quadric: Quadric, support: Vec<Vec3>, n: usize, seed: u64) -> Option<Self> {
        let q = quadric.retagged(ptype).ok()?;
        let bp = BoundedPrimitive::new(q.clone(), support)?;
        let points = sample_surface(&bp, n, seed).unwrap_or_else(|_| bp.support.clone());
        Some(EvalPrimitive { ptype, quadric: q, points })
    }

    /// Ground-truth primitive sampled with a seed derived from its index.
    pub fn from_bounded(bp: &BoundedPrimitive, index: usize) -> Option<Self> {
        Self::sampled(bp.quadric.type_tag(), bp.quadric.clone(), bp.support.clone(), EVAL_SAMPLES, index as u64)
    }

    /// Analytic unit normals at the sample points, dropping singular ones.
    pub fn oriented_points(&self) -> (Vec<Vec3>, Vec<Vec3>) {
        self.points.iter().filter_map(|p| self.quadric.normal(p).map(|n| (*p, n))).unzip()
    }
}

/// Hungarian matching minimizing per-pair Chamfer distance.
pub fn eval_match(pred: &[EvalPrimitive], gt: &[EvalPrimitive]) -> MatchResult {
    if pred.is_empty() || gt.is_empty() {
        return MatchResult { pairs: Vec::new(), total: 0.0, unmatched: (0..pred.len()).collect(), terms: Vec::new() };
    }
    let cost: Vec<Vec<f64>> =
        pred.iter().map(|p| gt.iter().map(|g| chamfer(&p.points, &g.points).unwrap_or(f64::MAX / 4.0)).collect()).collect();
    hungarian(&cost).expect("finite Chamfer costs")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrimitiveQuality {
    pub f1: f64,
    /// Percent of pairs with the correct type.
    pub type_acc: f64,
    /// Mean axis angle in degrees over type-correct axis-bearing pairs.
    pub axis_deg: Option<f64>,
    /// Mean ground-truth-sample residual, ×100.
    pub res: f64,
    /// Percent of ground-truth samples within `COVER_EPS`.
    pub cov: f64,
    pub matched: usize,
}

/// Residual and coverage of ground-truth samples against a predicted quadric.
fn residual_cover(samples: &[Vec3], q: &Quadric, eps: f64) -> (f64, f64) {
    let d: Vec<f64> = samples.iter().map(|x| q.distance_or_fallback(x)).collect();
    (mean(&d), d.iter().filter(|&&v| v < eps).count() as f64 / d.len() as f64)
}

pub fn primitive_quality(m: &MatchResult, pred: &[EvalPrimitive], gt: &[EvalPrimitive]) -> Result<PrimitiveQuality> {
    primitive_quality_eps(m, pred, gt, COVER_EPS)
}

pub fn primitive_quality_eps(
    m: &MatchResult,
    pred: &[EvalPrimitive],
    gt: &[EvalPrimitive],
    eps: f64,
) -> Result<PrimitiveQuality> {
    if m.pairs.is_empty() {
        return Err(MetricsError::EmptyMatching);
    }
    let n = m.pairs.len() as f64;
    let (mut f1, mut typed, mut res, mut cov) = (0.0, 0.0, 0.0, 0.0);
    let mut axes = Vec::new();
    for &(k, g) in &m.pairs {
        let (p, t) = (&pred[k], &gt[g]);
        f1 += fscore(&p.points, &t.points, FSCORE_TAU)?;
        if p.ptype == t.ptype {
            typed += 1.0;
            if t.ptype.has_axis() {
                if let (Ok(a), Ok(b)) = (p.quadric.axis(), t.quadric.axis()) {
                    axes.push(a.cross(&b).norm().atan2(a.dot(&b).abs()).to_degrees());
                }
            }
        }
        if t.points.is_empty() {
            return Err(MetricsError::EmptySet);
        }
        let (r, c) = residual_cover(&t.points, &p.quadric, eps);
        res += r;
        cov += c;
    }
    Ok(PrimitiveQuality {
        f1: f1 / n,
        type_acc: 100.0 * typed / n,
        axis_deg: (!axes.is_empty()).then(|| mean(&axes)),
        res: 100.0 * res / n,
        cov: 100.0 * cov / n,
        matched: m.pairs.len(),
    })
}

/// Evaluation summary for one shape, or a mean over shapes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Chamfer distance ×100.
    pub cd: f64,
    /// Hausdorff distance ×100.
    pub hd: f64,
    pub nc: f64,
    pub fscore: f64,
    pub primitive_f1: f64,
    pub type_acc: f64,
    pub axis_deg: Option<f64>,
    pub res: Option<f64>,
    pub cov: f64,
    pub evaluated: usize,
    pub matched: usize,
}

/// Geometric metrics on the sampled unions and primitive metrics on the
/// matching. `fallback` stands in for the prediction when no primitive is
/// predicted.
pub fn evaluate(pred: &[EvalPrimitive], gt: &[EvalPrimitive], fallback: &[Vec3]) -> Result<EvalReport> {
    let (gp, gn): (Vec<Vec3>, Vec<Vec3>) = gt.iter().map(|g| g.oriented_points()).fold(
        (Vec::new(), Vec::new()),
        |(mut p, mut n), (a, b)| {
            p.extend(a);
            n.extend(b);
            (p, n)
        },
    );
    let (mut pp, mut pn) = (Vec::new(), Vec::new());
    for p in pred {
        let (a, b) = p.oriented_points();
        pp.extend(a);
        pn.extend(b);
    }
    let points: Vec<Vec3> = if pp.is_empty() { fallback.to_vec() } else { pp.clone() };
    let nc = if pp.is_empty() { 0.0 } else { normal_consistency(&pp, &pn, &gp, &gn)? };
    let m = eval_match(pred, gt);
    let q = primitive_quality(&m, pred, gt).ok();
    Ok(EvalReport {
        cd: 100.0 * chamfer(&points, &gp)?,
        hd: 100.0 * hausdorff(&points, &gp)?,
        nc,
        fscore: fscore(&points, &gp, FSCORE_TAU)?,
        primitive_f1: q.as_ref().map_or(0.0, |q| q.f1),
        type_acc: q.as_ref().map_or(0.0, |q| q.type_acc),
        axis_deg: q.as_ref().and_then(|q| q.axis_deg),
        res: q.as_ref().map(|q| q.res),
        cov: q.as_ref().map_or(0.0, |q| q.cov),
        evaluated: gt.len(),
        matched: m.pairs.len(),
    })
}

/// Mean of per-shape reports; optional fields average over shapes where defined.
pub fn mean_report(reports: &[EvalReport]) -> Option<EvalReport> {
    if reports.is_empty() {
        return None;
    }
    let n = reports.len() as f64;
    let avg = |f: fn(&EvalReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let avg_opt = |f: fn(&EvalReport) -> Option<f64>| {
        let v: Vec<f64> = reports.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| mean(&v))
    };
    Some(EvalReport {
        cd: avg(|r| r.cd),
        hd: avg(|r| r.hd),
        nc: avg(|r| r.nc),
        fscore: avg(|r| r.fscore),
        primitive_f1: avg(|r| r.primitive_f1),
        type_acc: avg(|r| r.type_acc),
        axis_deg: avg_opt(|r| r.axis_deg),
        res: avg_opt(|r| r.res),
        cov: avg(|r| r.cov),
        evaluated: reports.iter().map(|r| r.evaluated).sum(),
        matched: reports.iter().map(|r| r.matched).sum(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Shape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec3> {
        (0..n).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect()
    }

    fn plane(z: f64) -> EvalPrimitive {
        let q = Shape::Plane { normal: Vec3::z(), offset: -z }.to_quadric();
        let support = vec![Vec3::new(0.0, 0.0, z), Vec3::new(0.5, 0.5, z), Vec3::new(0.5, 0.0, z)];
        EvalPrimitive::sampled(PrimitiveType::Plane, q, support, EVAL_SAMPLES, 1).unwrap()
    }

    #[test]
    fn chamfer_examples() {
        let a = [Vec3::zeros()];
        let b = [Vec3::x()];
        assert_eq!(chamfer(&a, &b).unwrap(), 1.0);
        assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
        assert_eq!(chamfer(&a, &[]), Err(MetricsError::EmptySet));
    }

    #[test]
    fn chamfer_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let (a, b) = (random_set(&mut rng, 100), random_set(&mut rng, 100));
            let brute = |x: &[Vec3], y: &[Vec3]| {
                x.iter().map(|p| y.iter().map(|q| (p - q).norm()).fold(f64::INFINITY, f64::min)).sum::<f64>()
                    / x.len() as f64
            };
            let want = 0.5 * (brute(&a, &b) + brute(&b, &a));
            assert!((chamfer(&a, &b).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn hausdorff_examples() {
        assert_eq!(hausdorff(&[Vec3::zeros()], &[Vec3::new(0.0, 2.0, 0.0)]).unwrap(), 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let (a, b) = (random_set(&mut rng, 5), random_set(&mut rng, 7));
            assert!(hausdorff(&a, &b).unwrap() >= chamfer(&a, &b).unwrap());
        }
    }

    #[test]
    fn normal_consistency_examples() {
        let p = [Vec3::zeros(), Vec3::x()];
        let n = [Vec3::z(), Vec3::z()];
        assert!((normal_consistency(&p, &n, &p, &n).unwrap() - 1.0).abs() < 1e-12);
        let r = [Vec3::x(), Vec3::x()];
        assert_eq!(normal_consistency(&p, &n, &p, &r).unwrap(), 0.0);
        let bad = [Vec3::z() * 2.0, Vec3::z()];
        assert!(matches!(normal_consistency(&p, &bad, &p, &n), Err(MetricsError::NonUnitNormal { .. })));
        let a = plane(0.0);
        let b = EvalPrimitive::sampled(PrimitiveType::Plane, a.quadric.clone(), a.points.clone(), 300, 9).unwrap();
        let (pa, na) = a.oriented_points();
        let (pb, nb) = b.oriented_points();
        assert!((normal_consistency(&pa, &na, &pb, &nb).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn fscore_examples() {
        let a = [Vec3::zeros(), Vec3::x()];
        assert_eq!(fscore(&a, &a, 0.01).unwrap(), 1.0);
        assert_eq!(fscore(&a, &[Vec3::new(5.0, 5.0, 5.0)], 0.01).unwrap(), 0.0);
        let b = [Vec3::zeros()];
        assert!((fscore(&a, &b, 0.01).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn matching_identity_and_swap() {
        let prims = vec![plane(0.0), plane(0.3), plane(-0.3)];
        let m = eval_match(&prims, &prims);
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        let swapped = vec![prims[2].clone(), prims[0].clone(), prims[1].clone()];
        let s = eval_match(&swapped, &prims);
        assert_eq!(s.pairs, vec![(0, 2), (1, 0), (2, 1)]);
        assert!((s.total - m.total).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_quality() {
        let prims = vec![plane(0.0), plane(0.3)];
        let q = primitive_quality(&eval_match(&prims, &prims), &prims, &prims).unwrap();
        assert_eq!((q.f1, q.type_acc, q.axis_deg, q.res, q.cov), (1.0, 100.0, Some(0.0), 0.0, 100.0));
    }

    #[test]
    fn offset_plane_quality() {
        let gt = vec![plane(0.0)];
        let pred = vec![plane(0.005)];
        let q = primitive_quality(&eval_match(&pred, &gt), &pred, &gt).unwrap();
        assert_eq!(q.cov, 100.0);
        assert!((q.res - 0.5).abs() < 1e-9, "{}", q.res);
    }

    #[test]
    fn wrong_type_leaves_axis_mean() {
        let gt = vec![plane(0.0), plane(0.3)];
        let mut pred = gt.clone();
        pred[1].ptype = PrimitiveType::Cylinder;
        let m = MatchResult { pairs: vec![(0, 0), (1, 1)], total: 0.0, unmatched: vec![], terms: vec![] };
        let q = primitive_quality(&m, &pred, &gt).unwrap();
        assert_eq!(q.type_acc, 50.0);
        assert_eq!(q.axis_deg, Some(0.0));
        let only = MatchResult { pairs: vec![(1, 1)], ..m };
        assert_eq!(primitive_quality(&only, &pred, &gt).unwrap().axis_deg, None);
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let prims = vec![plane(0.0), plane(0.3)];
        let r = evaluate(&prims, &prims, &[]).unwrap();
        assert!(r.cd < 1e-12 && r.hd < 1e-12);
        assert!((r.nc - 1.0).abs() < 1e-9);
        assert_eq!((r.fscore, r.type_acc, r.cov, r.res), (1.0, 100.0, 100.0, Some(0.0)));
    }
}
