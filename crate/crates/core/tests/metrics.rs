use nalgebra::{Rotation3, Unit};
use proptest::prelude::*;
use quadcomp::assignment::hungarian;
use quadcomp::geometry::{Quadric, Shape, Vec3};
use quadcomp::metrics::{
    chamfer, eval_match, fscore, hausdorff, normal_consistency, primitive_quality, primitive_quality_eps, EvalPrimitive,
};

fn cloud(max: usize) -> impl Strategy<Value = Vec<Vec3>> {
    prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z)), 1..max)
}

fn rigid() -> impl Strategy<Value = (Rotation3<f64>, Vec3)> {
    ((-1.0..1.0f64, -1.0..1.0f64, 0.2..1.0f64), -3.0..3.0f64, (-2.0..2.0f64, -2.0..2.0f64, -2.0..2.0f64)).prop_map(
        |((x, y, z), angle, (a, b, c))| (Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::new(x, y, z)), angle), Vec3::new(a, b, c)),
    )
}

fn plane(normal: Vec3, offset: f64, seed: u64) -> EvalPrimitive {
    let n = normal.normalize();
    let q = Shape::Plane { normal: n, offset }.to_quadric();
    let origin = -n * offset;
    let t = n.cross(&Vec3::new(0.3, 0.5, 0.7)).normalize();
    let support = vec![origin + t * 0.4 + n.cross(&t) * 0.4, origin - t * 0.4 - n.cross(&t) * 0.4];
    EvalPrimitive::sampled(quadcomp::geometry::PrimitiveType::Plane, q, support, 128, seed).unwrap()
}

fn moved(p: &EvalPrimitive, rot: &Rotation3<f64>, shift: &Vec3) -> EvalPrimitive {
    let m = rot.matrix();
    let mut t = nalgebra::Matrix4::identity();
    t.fixed_view_mut::<3, 3>(0, 0).copy_from(&m.transpose());
    t.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-(m.transpose() * shift)));
    let a = t.transpose() * p.quadric.matrix() * t;
    EvalPrimitive {
        ptype: p.ptype,
        quadric: Quadric::from_matrix(&a, p.ptype).unwrap(),
        points: p.points.iter().map(|x| rot * x + shift).collect(),
    }
}

#[test]
fn eval_match_equals_enumeration_on_five_by_four() {
    let pred: Vec<EvalPrimitive> = (0..5).map(|i| plane(Vec3::new(0.1 * i as f64, 0.3, 1.0), 0.05 * i as f64, i)).collect();
    let gt: Vec<EvalPrimitive> = (0..4).map(|i| plane(Vec3::new(0.3, 0.1 * i as f64, 1.0), -0.04 * i as f64, 10 + i)).collect();
    let m = eval_match(&pred, &gt);
    let mut best = f64::INFINITY;
    for a in 0..5 {
        for b in 0..5 {
            for c in 0..5 {
                for d in 0..5 {
                    let rows = [a, b, c, d];
                    if (0..4).any(|i| (i + 1..4).any(|j| rows[i] == rows[j])) {
                        continue;
                    }
                    let mut pairs: Vec<(usize, usize)> = rows.iter().enumerate().map(|(g, &k)| (k, g)).collect();
                    pairs.sort();
                    best = best.min(pairs.iter().map(|&(k, g)| chamfer(&pred[k].points, &gt[g].points).unwrap()).sum());
                }
            }
        }
    }
    assert_eq!(m.pairs.len(), 4);
    assert_eq!(m.total, best);
    let cost: Vec<Vec<f64>> = pred.iter().map(|p| gt.iter().map(|g| chamfer(&p.points, &g.points).unwrap()).collect()).collect();
    assert_eq!(hungarian(&cost).unwrap().pairs, m.pairs);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn set_distances_are_symmetric_and_ordered(a in cloud(40), b in cloud(40)) {
        let (cd, hd) = (chamfer(&a, &b).unwrap(), hausdorff(&a, &b).unwrap());
        prop_assert_eq!(cd, chamfer(&b, &a).unwrap());
        prop_assert_eq!(hd, hausdorff(&b, &a).unwrap());
        prop_assert!(hd >= cd && cd >= 0.0);
        let f = fscore(&a, &b, 0.3).unwrap();
        prop_assert!((0.0..=1.0).contains(&f));
        prop_assert_eq!(chamfer(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn set_metrics_ignore_rigid_motion(a in cloud(40), b in cloud(40), (rot, shift) in rigid()) {
        let m = |v: &[Vec3]| v.iter().map(|x| rot * x + shift).collect::<Vec<_>>();
        let (ma, mb) = (m(&a), m(&b));
        prop_assert!((chamfer(&a, &b).unwrap() - chamfer(&ma, &mb).unwrap()).abs() < 1e-9);
        prop_assert!((hausdorff(&a, &b).unwrap() - hausdorff(&ma, &mb).unwrap()).abs() < 1e-9);
        let na: Vec<Vec3> = a.iter().map(|x| (x + Vec3::new(0.1, 0.2, 0.3)).normalize()).collect();
        let nb: Vec<Vec3> = b.iter().map(|x| (x - Vec3::new(0.3, 0.1, 0.2)).normalize()).collect();
        let rn = |v: &[Vec3]| v.iter().map(|x| rot * x).collect::<Vec<_>>();
        let nc = normal_consistency(&a, &na, &b, &nb).unwrap();
        prop_assert!((nc - normal_consistency(&ma, &rn(&na), &mb, &rn(&nb)).unwrap()).abs() < 1e-9);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&nc));
    }

    #[test]
    fn primitive_quality_ignores_rigid_motion(
        n1 in (-1.0..1.0f64, -1.0..1.0f64, 0.3..1.0f64), n2 in (-1.0..1.0f64, -1.0..1.0f64, 0.3..1.0f64),
        o in -0.2..0.2f64, (rot, shift) in rigid(),
    ) {
        let pred = vec![plane(Vec3::new(n1.0, n1.1, n1.2), o, 1)];
        let gt = vec![plane(Vec3::new(n2.0, n2.1, n2.2), 0.0, 2)];
        let m = eval_match(&pred, &gt);
        let a = primitive_quality(&m, &pred, &gt).unwrap();
        let (mp, mg): (Vec<_>, Vec<_>) = (pred.iter().map(|p| moved(p, &rot, &shift)).collect(), gt.iter().map(|p| moved(p, &rot, &shift)).collect());
        let b = primitive_quality(&m, &mp, &mg).unwrap();
        prop_assert!((a.f1 - b.f1).abs() < 1e-9);
        prop_assert!((a.res - b.res).abs() < 1e-7, "{} {}", a.res, b.res);
        prop_assert!((a.axis_deg.unwrap() - b.axis_deg.unwrap()).abs() < 1e-6);
        prop_assert!((0.0..=90.0).contains(&a.axis_deg.unwrap()));
        prop_assert!((0.0..=100.0).contains(&a.cov) && a.res >= 0.0);
        prop_assert_eq!(primitive_quality_eps(&m, &pred, &gt, f64::INFINITY).unwrap().cov, 100.0);
    }
}
