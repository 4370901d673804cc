use super::{hungarian, AssignmentError, CostWeights, MatchResult};
use crate::geometry::{sign_invariant_l1, Vec3};
use crate::scene::LabeledCloud;
use crate::spatial::KdTree;

pub const PROB_CLAMP: f64 = 1e-7;
/// Chamfer term used when either side of a pair has no points.
pub const EMPTY_CD_PENALTY: f64 = 1.0;
pub const MEMBERSHIP_THRESHOLD: f64 = 0.5;

fn clamp_p(p: f64) -> (f64, bool) {
    let c = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    (c, c == p)
}

/// Mean binary cross-entropy against a 0/1 indicator.
pub fn bce_loss(probs: &[f64], target: &[bool]) -> f64 {
    let s: f64 = probs
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let p = clamp_p(p).0;
            if t {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    s / probs.len().max(1) as f64
}

fn bce_grad(probs: &[f64], target: &[bool], scale: f64, out: &mut [f64]) {
    let n = probs.len().max(1) as f64;
    for ((&p, &t), o) in probs.iter().zip(target).zip(out) {
        let (c, free) = clamp_p(p);
        if free {
            *o += scale * if t { -1.0 / c } else { 1.0 / (1.0 - c) } / n;
        }
    }
}

/// Soft Dice loss with smoothing 1.
pub fn dice_loss(probs: &[f64], target: &[bool]) -> f64 {
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in probs.iter().zip(target) {
        let p = clamp_p(p).0;
        let t = if t { 1.0 } else { 0.0 };
        inter += p * t;
        sp += p;
        st += t;
    }
    1.0 - (2.0 * inter + 1.0) / (sp + st + 1.0)
}

fn dice_grad(probs: &[f64], target: &[bool], scale: f64, out: &mut [f64]) {
    let (mut inter, mut sp, mut st) = (0.0, 0.0, 0.0);
    for (&p, &t) in probs.iter().zip(target) {
        let p = clamp_p(p).0;
        let t = if t { 1.0 } else { 0.0 };
        inter += p * t;
        sp += p;
        st += t;
    }
    let den = sp + st + 1.0;
    let num = 2.0 * inter + 1.0;
    for ((&p, &t), o) in probs.iter().zip(target).zip(out) {
        if clamp_p(p).1 {
            let t = if t { 1.0 } else { 0.0 };
            *o += scale * -(2.0 * t * den - num) / (den * den);
        }
    }
}

/// Nearest-neighbor correspondences of a Chamfer pair: `ab[i]` is the index in
/// `b` closest to `a[i]`, and `ba` the converse.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ChamferNn {
    pub ab: Vec<usize>,
    pub ba: Vec<usize>,
}

pub fn chamfer_nn(a: &[Vec3], b: &[Vec3], b_tree: &KdTree) -> ChamferNn {
    let a_tree = KdTree::new(a);
    ChamferNn {
        ab: a.iter().map(|p| b_tree.nearest(p).map_or(0, |x| x.0)).collect(),
        ba: b.iter().map(|p| a_tree.nearest(p).map_or(0, |x| x.0)).collect(),
    }
}

/// Symmetric mean nearest-neighbor distance under fixed correspondences.
pub fn chamfer_frozen(a: &[Vec3], b: &[Vec3], nn: &ChamferNn) -> f64 {
    if a.is_empty() || b.is_empty() {
        return EMPTY_CD_PENALTY;
    }
    let ab: f64 = a.iter().zip(&nn.ab).map(|(p, &j)| (p - b[j]).norm()).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.iter().zip(&nn.ba).map(|(p, &i)| (p - a[i]).norm()).sum::<f64>() / b.len() as f64;
    0.5 * (ab + ba)
}

/// Adds `scale · ∂CD/∂a` into `grad[idx[i]]` for every point `a[i]`.
fn chamfer_grad_a(a: &[Vec3], b: &[Vec3], nn: &ChamferNn, scale: f64, idx: &[usize], grad: &mut [Vec3]) {
    if a.is_empty() || b.is_empty() {
        return;
    }
    let unit = |d: Vec3| {
        let n = d.norm();
        if n > 1e-15 {
            d / n
        } else {
            Vec3::zeros()
        }
    };
    let wa = 0.5 * scale / a.len() as f64;
    let wb = 0.5 * scale / b.len() as f64;
    for (i, (p, &j)) in a.iter().zip(&nn.ab).enumerate() {
        grad[idx[i]] += unit(p - b[j]) * wa;
    }
    for (q, &i) in b.iter().zip(&nn.ba) {
        grad[idx[i]] += unit(a[i] - q) * wb;
    }
}

/// Patches whose membership reaches the threshold.
pub fn inlier_patches(row: &[f64]) -> Vec<usize> {
    row.iter().enumerate().filter(|(_, &m)| m >= MEMBERSHIP_THRESHOLD).map(|(u, _)| u).collect()
}

/// One candidate as seen by the matching cost.
#[derive(Debug, Clone, Copy)]
pub struct CandidateView<'a> {
    pub probs: &'a [f64],
    pub membership: &'a [f64],
    /// Canonically normalized coefficients.
    pub theta: &'a [f64; 10],
    pub inliers: &'a [Vec3],
}

/// One ground-truth primitive with its current target patches.
#[derive(Debug, Clone, Copy)]
pub struct TargetView<'a> {
    pub class: usize,
    pub patches: &'a [usize],
    pub theta: &'a [f64; 10],
    pub points: &'a [Vec3],
    pub tree: &'a KdTree,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PairCost {
    pub semantic: f64,
    pub membership: f64,
    pub chamfer: f64,
    pub param: f64,
    pub total: f64,
}

fn indicator(patches: &[usize], u: usize) -> Vec<bool> {
    let mut t = vec![false; u];
    for &p in patches {
        t[p] = true;
    }
    t
}

/// Matching cost of one candidate against one target, with its terms.
pub fn pair_cost(c: &CandidateView, t: &TargetView, w: &CostWeights) -> PairCost {
    let semantic = -w.alpha1_pos * clamp_p(c.probs[t.class]).0.ln();
    let ind = indicator(t.patches, c.membership.len());
    let membership = w.alpha2 * (bce_loss(c.membership, &ind) + dice_loss(c.membership, &ind));
    let cd = if c.inliers.is_empty() || t.points.is_empty() {
        EMPTY_CD_PENALTY
    } else {
        chamfer_frozen(c.inliers, t.points, &chamfer_nn(c.inliers, t.points, t.tree))
    };
    let chamfer = w.alpha3 * cd;
    let param = w.alpha3 * w.lambda * sign_invariant_l1(c.theta, t.theta).0;
    PairCost { semantic, membership, chamfer, param, total: semantic + membership + chamfer + param }
}

/// Ground truth prepared for repeated loss evaluation.
#[derive(Debug, Clone)]
pub struct GtShape {
    pub points: Vec<Vec3>,
    pub tree: KdTree,
    pub prim_points: Vec<Vec<Vec3>>,
    pub prim_trees: Vec<KdTree>,
    pub thetas: Vec<[f64; 10]>,
    pub classes: Vec<usize>,
}

impl GtShape {
    pub fn new(cloud: &LabeledCloud, type_count: usize) -> Result<GtShape, AssignmentError> {
        let classes = cloud
            .primitives
            .iter()
            .enumerate()
            .map(|(g, bp)| bp.quadric.type_tag().class_index(type_count).ok_or(AssignmentError::UnsupportedType(g + 1)))
            .collect::<Result<Vec<_>, _>>()?;
        let prim_points: Vec<Vec<Vec3>> = cloud.primitives.iter().map(|bp| bp.support.clone()).collect();
        Ok(GtShape {
            tree: KdTree::new(&cloud.points),
            points: cloud.points.clone(),
            prim_trees: prim_points.iter().map(|p| KdTree::new(p)).collect(),
            prim_points,
            thetas: cloud.primitives.iter().map(|bp| *bp.quadric.coeffs()).collect(),
            classes,
        })
    }

    pub fn primitive_count(&self) -> usize {
        self.classes.len()
    }
}

/// Network outputs entering the loss, all row-major.
#[derive(Debug, Clone, Copy)]
pub struct LossInputs<'a> {
    pub type_count: usize,
    /// K × type_count, rows sum to 1, null class last.
    pub probs: &'a [f64],
    /// K × U.
    pub membership: &'a [f64],
    /// K canonical coefficient vectors.
    pub theta: &'a [[f64; 10]],
    /// U × J completed points, patch-major.
    pub points: &'a [Vec3],
}

/// Every discrete decision taken by the loss. Replaying a plan makes the
/// loss a smooth function of its inputs.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossPlan {
    pub pairs: Vec<(usize, usize)>,
    pub inliers: Vec<Vec<usize>>,
    pub pair_nn: Vec<ChamferNn>,
    pub pair_signs: Vec<f64>,
    pub point_nn: ChamferNn,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub semantic: f64,
    pub membership: f64,
    pub chamfer: f64,
    pub param: f64,
    pub null: f64,
    pub points: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        self.semantic + self.membership + self.chamfer + self.param + self.null + self.points
    }

    pub fn add(&mut self, o: &LossBreakdown) {
        self.semantic += o.semantic;
        self.membership += o.membership;
        self.chamfer += o.chamfer;
        self.param += o.param;
        self.null += o.null;
        self.points += o.points;
    }

    /// Name of the first non-finite term.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("semantic", self.semantic),
            ("membership", self.membership),
            ("chamfer", self.chamfer),
            ("param", self.param),
            ("null", self.null),
            ("points", self.points),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub probs: Vec<f64>,
    pub membership: Vec<f64>,
    pub theta: Vec<[f64; 10]>,
    pub points: Vec<Vec3>,
}

#[derive(Debug, Clone)]
pub struct LossOutput {
    pub total: f64,
    pub breakdown: LossBreakdown,
    pub matching: MatchResult,
    pub grads: LossGrads,
    pub plan: LossPlan,
}

/// Matched pair costs, unmatched null terms and the completion Chamfer term,
/// with gradients with respect to every input.
///
/// Targets with empty patch sets stay in the matching pool. Passing `plan`
/// replays its matching, inlier sets, correspondences and signs.
pub fn total_loss(
    inputs: &LossInputs,
    gt: &GtShape,
    target_sets: &[Vec<usize>],
    w: &CostWeights,
    plan: Option<&LossPlan>,
) -> Result<LossOutput, AssignmentError> {
    let c = inputs.type_count;
    let k = inputs.theta.len();
    if k == 0 || inputs.probs.len() != k * c || inputs.membership.len() % k != 0 {
        return Err(AssignmentError::Shape("inconsistent candidate arrays".into()));
    }
    let u = inputs.membership.len() / k;
    if u == 0 || inputs.points.len() % u != 0 || target_sets.len() != gt.primitive_count() {
        return Err(AssignmentError::Shape("inconsistent patch or target arrays".into()));
    }
    let j = inputs.points.len() / u;
    let row = |kk: usize| &inputs.membership[kk * u..(kk + 1) * u];
    let probs = |kk: usize| &inputs.probs[kk * c..(kk + 1) * c];

    let inliers: Vec<Vec<usize>> = match plan {
        Some(p) => p.inliers.clone(),
        None => (0..k).map(|kk| inlier_patches(row(kk))).collect(),
    };
    let point_idx: Vec<Vec<usize>> = inliers.iter().map(|ps| ps.iter().flat_map(|&p| p * j..(p + 1) * j).collect()).collect();
    let inlier_pts: Vec<Vec<Vec3>> = point_idx.iter().map(|ix| ix.iter().map(|&i| inputs.points[i]).collect()).collect();
    let target = |g: usize| TargetView {
        class: gt.classes[g],
        patches: &target_sets[g],
        theta: &gt.thetas[g],
        points: &gt.prim_points[g],
        tree: &gt.prim_trees[g],
    };
    let candidate =
        |kk: usize| CandidateView { probs: probs(kk), membership: row(kk), theta: &inputs.theta[kk], inliers: &inlier_pts[kk] };

    let mut matching = match plan {
        Some(p) => {
            let matched: Vec<usize> = p.pairs.iter().map(|x| x.0).collect();
            MatchResult {
                pairs: p.pairs.clone(),
                total: 0.0,
                unmatched: (0..k).filter(|x| !matched.contains(x)).collect(),
                terms: Vec::new(),
            }
        }
        None => {
            let cost: Vec<Vec<f64>> =
                (0..k).map(|kk| (0..gt.primitive_count()).map(|g| pair_cost(&candidate(kk), &target(g), w).total).collect()).collect();
            hungarian(&cost)?
        }
    };

    let mut grads = LossGrads {
        probs: vec![0.0; k * c],
        membership: vec![0.0; k * u],
        theta: vec![[0.0; 10]; k],
        points: vec![Vec3::zeros(); inputs.points.len()],
    };
    let mut bd = LossBreakdown::default();
    let mut new_plan = LossPlan { pairs: matching.pairs.clone(), inliers: inliers.clone(), ..LossPlan::default() };
    matching.terms.clear();
    for (pi, &(kk, g)) in matching.pairs.iter().enumerate() {
        let t = target(g);
        let cv = candidate(kk);
        // semantic
        let (pc, free) = clamp_p(cv.probs[t.class]);
        let semantic = -w.alpha1_pos * pc.ln();
        if free {
            grads.probs[kk * c + t.class] += -w.alpha1_pos / pc;
        }
        // membership
        let ind = indicator(t.patches, u);
        let membership = w.alpha2 * (bce_loss(cv.membership, &ind) + dice_loss(cv.membership, &ind));
        let mrow = &mut grads.membership[kk * u..(kk + 1) * u];
        bce_grad(cv.membership, &ind, w.alpha2, mrow);
        dice_grad(cv.membership, &ind, w.alpha2, mrow);
        // chamfer between inliers and the target's points
        let nn = match plan {
            Some(p) => p.pair_nn[pi].clone(),
            None if cv.inliers.is_empty() || t.points.is_empty() => ChamferNn::default(),
            None => chamfer_nn(cv.inliers, t.points, t.tree),
        };
        let chamfer = w.alpha3 * chamfer_frozen(cv.inliers, t.points, &nn);
        chamfer_grad_a(cv.inliers, t.points, &nn, w.alpha3, &point_idx[kk], &mut grads.points);
        // parameters
        let sign = match plan {
            Some(p) => p.pair_signs[pi],
            None => sign_invariant_l1(cv.theta, t.theta).1,
        };
        let mut l1 = 0.0;
        for i in 0..10 {
            let d = cv.theta[i] - sign * t.theta[i];
            l1 += d.abs();
            grads.theta[kk][i] += w.alpha3 * w.lambda * if d > 0.0 { 1.0 } else if d < 0.0 { -1.0 } else { 0.0 };
        }
        let param = w.alpha3 * w.lambda * l1;
        let pc = PairCost { semantic, membership, chamfer, param, total: semantic + membership + chamfer + param };
        bd.semantic += semantic;
        bd.membership += membership;
        bd.chamfer += chamfer;
        bd.param += param;
        matching.terms.push(pc);
        new_plan.pair_nn.push(nn);
        new_plan.pair_signs.push(sign);
    }
    matching.total = matching.terms.iter().map(|t| t.total).sum();
    for &kk in &matching.unmatched {
        let (pn, free) = clamp_p(probs(kk)[c - 1]);
        bd.null += -w.alpha1_null * pn.ln();
        if free {
            grads.probs[kk * c + c - 1] += -w.alpha1_null / pn;
        }
    }
    let point_nn = match plan {
        Some(p) => p.point_nn.clone(),
        None => chamfer_nn(inputs.points, &gt.points, &gt.tree),
    };
    bd.points = chamfer_frozen(inputs.points, &gt.points, &point_nn);
    let all: Vec<usize> = (0..inputs.points.len()).collect();
    chamfer_grad_a(inputs.points, &gt.points, &point_nn, 1.0, &all, &mut grads.points);
    new_plan.point_nn = point_nn;

    if bd.non_finite_term().is_some() {
        return Err(AssignmentError::NonFinite);
    }
    Ok(LossOutput { total: bd.total(), breakdown: bd, matching, grads, plan: new_plan })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_examples() {
        assert!(bce_loss(&[1.0, 0.0], &[true, false]) <= 1e-6);
        assert!((bce_loss(&[0.5; 4], &[true, false, true, true]) - std::f64::consts::LN_2).abs() < 1e-15);
        let p = [0.2, 0.7, 0.9];
        let t = [false, true, false];
        let direct = -((0.8f64).ln() + (0.7f64).ln() + (0.1f64).ln()) / 3.0;
        assert!((bce_loss(&p, &t) - direct).abs() < 1e-15);
    }

    #[test]
    fn dice_examples() {
        assert!(dice_loss(&[1.0, 0.0], &[true, false]).abs() < 1e-6);
        assert!((dice_loss(&[0.5, 0.5], &[true, false]) - 1.0 / 3.0).abs() < 1e-12);
        assert!(dice_loss(&[0.0, 0.0], &[false, false]).abs() < 1e-6);
    }

    #[test]
    fn membership_gradients_match_differences() {
        let p = [0.2, 0.7, 0.9, 0.4];
        let t = [false, true, false, true];
        let mut g = [0.0; 4];
        bce_grad(&p, &t, 1.0, &mut g);
        dice_grad(&p, &t, 1.0, &mut g);
        let f = |q: &[f64]| bce_loss(q, &t) + dice_loss(q, &t);
        for i in 0..4 {
            let h = 1e-6;
            let (mut a, mut b) = (p, p);
            a[i] += h;
            b[i] -= h;
            let fd = (f(&a) - f(&b)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-7, "{i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn empty_inliers_use_penalty() {
        let nn = ChamferNn::default();
        assert_eq!(chamfer_frozen(&[], &[Vec3::zeros()], &nn), EMPTY_CD_PENALTY);
    }
}
