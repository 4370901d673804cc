use proptest::prelude::*;
use quadcomp::geometry::{Shape, Vec3};
use quadcomp::scene::LabeledCloud;
use quadcomp::targets::{assign_point_labels, build_target_sets, induce_targets, patch_majority, PatchedPrediction};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, g: usize, grid: bool) -> LabeledCloud {
    let q = Shape::Plane { normal: Vec3::z(), offset: 0.0 }.to_quadric();
    let coord = |rng: &mut ChaCha8Rng| if grid { rng.random_range(0..8) as f64 / 8.0 } else { rng.random_range(0.0..1.0) };
    let points: Vec<Vec3> = (0..n).map(|_| Vec3::new(coord(rng), coord(rng), coord(rng))).collect();
    let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(1..=g)).collect();
    labels[..g].iter_mut().enumerate().for_each(|(i, l)| *l = i + 1);
    LabeledCloud::from_labels(points, labels, vec![q; g]).unwrap()
}

fn brute_labels(pred: &[Vec3], gt: &LabeledCloud) -> Vec<usize> {
    pred.iter()
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for (i, q) in gt.points.iter().enumerate() {
                let d = (p - q).norm_squared();
                if d < best.0 {
                    best = (d, i);
                }
            }
            gt.labels[best.1]
        })
        .collect()
}

#[test]
fn labels_match_brute_force_on_ten_thousand_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for grid in [false, true] {
        let gt = random_cloud(&mut rng, 10_000, 7, grid);
        let pred: Vec<Vec3> = (0..1000)
            .map(|_| {
                if grid {
                    Vec3::new(rng.random_range(0..16) as f64 / 16.0, rng.random_range(0..16) as f64 / 16.0, 0.5)
                } else {
                    Vec3::new(rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1), rng.random_range(-0.1..1.1))
                }
            })
            .collect();
        let pp = PatchedPrediction::new(100, 10, pred.clone());
        assert_eq!(assign_point_labels(&pp, &gt), brute_labels(&pred, &gt), "grid {grid}");
    }
}

#[test]
fn induction_is_stateless() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let gt = random_cloud(&mut rng, 500, 4, false);
    let pred: Vec<Vec3> = (0..64).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect();
    let pp = PatchedPrediction::new(8, 8, pred);
    assert_eq!(induce_targets(&pp, &gt), induce_targets(&pp, &gt));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn target_sets_partition_patches(labels in prop::collection::vec(1usize..=6, 1..40)) {
        let g = 6;
        let sets = build_target_sets(&labels, g);
        prop_assert_eq!(sets.len(), g);
        let mut all: Vec<usize> = sets.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
        for (u, &l) in labels.iter().enumerate() {
            prop_assert!(sets[l - 1].contains(&u));
        }
    }

    #[test]
    fn majority_ignores_order(mut labels in prop::collection::vec(1usize..=4, 1..16), rot in 0usize..16) {
        let a = patch_majority(&labels);
        let r = rot % labels.len();
        labels.rotate_left(r);
        prop_assert_eq!(patch_majority(&labels), a);
        labels.reverse();
        prop_assert_eq!(patch_majority(&labels), a);
        let count = |x: usize| labels.iter().filter(|&&l| l == x).count();
        prop_assert!(labels.iter().all(|&l| count(l) < count(a) || (count(l) == count(a) && l >= a)));
    }
}
