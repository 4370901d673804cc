use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{LabeledCloud, PartialScan, ScanSource, SceneError};
use crate::geometry::Vec3;

pub const DEFAULT_TARGET_COUNT: usize = 2048;

/// Removes the `round(ratio·N)` points lying furthest along a random view
/// direction, then farthest-point samples the rest down to `target_count`.
pub fn make_partial(
    cloud: &LabeledCloud,
    shape_id: &str,
    ratio: f64,
    seed: u64,
    target_count: usize,
) -> Result<PartialScan, SceneError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(SceneError::InvalidSpec(format!("incompleteness ratio {ratio} must lie in (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dir = loop {
        let g = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
        if g.norm() > 1e-9 {
            break g.normalize();
        }
    };
    let kept = crop_mask(&cloud.points, &dir, ratio);
    let retained: Vec<Vec3> = cloud.points.iter().zip(&kept).filter(|(_, k)| **k).map(|(p, _)| *p).collect();
    if retained.len() < target_count {
        return Err(SceneError::TooFewPoints { retained: retained.len(), requested: target_count });
    }
    let start = rng.random_range(0..retained.len());
    let idx = farthest_point_sample(&retained, target_count, start);
    Ok(PartialScan {
        points: idx.into_iter().map(|i| retained[i]).collect(),
        source: ScanSource { shape_id: shape_id.to_string(), ratio, crop_seed: seed, noise_sigma: 0.0 },
    })
}

/// `true` for points kept by a half-space crop along `dir`.
pub(crate) fn crop_mask(points: &[Vec3], dir: &Vec3, ratio: f64) -> Vec<bool> {
    let removed = (ratio * points.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[b].dot(dir).total_cmp(&points[a].dot(dir)).then(a.cmp(&b)));
    let mut kept = vec![true; points.len()];
    for &i in &order[..removed] {
        kept[i] = false;
    }
    kept
}

/// Greedy farthest-point sampling starting at `start`; ties go to the smallest index.
pub fn farthest_point_sample(points: &[Vec3], count: usize, start: usize) -> Vec<usize> {
    let count = count.min(points.len());
    if count == 0 {
        return Vec::new();
    }
    let mut dist = vec![f64::INFINITY; points.len()];
    let mut out = Vec::with_capacity(count);
    let mut cur = start;
    for _ in 0..count {
        out.push(cur);
        let c = points[cur];
        let mut best = (0, f64::NEG_INFINITY);
        for (i, p) in points.iter().enumerate() {
            let d = (p - c).norm_squared();
            if d < dist[i] {
                dist[i] = d;
            }
            if dist[i] > best.1 {
                best = (i, dist[i]);
            }
        }
        cur = best.0;
    }
    out
}

/// Adds isotropic Gaussian jitter with per-coordinate standard deviation
/// `sigma`, so the expected displacement length is about `sigma·√3`.
pub fn add_noise(scan: &PartialScan, sigma: f64, seed: u64) -> PartialScan {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let points = if sigma > 0.0 {
        scan.points
            .iter()
            .map(|p| {
                let g = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
                p + g * sigma
            })
            .collect()
    } else {
        scan.points.clone()
    };
    PartialScan { points, source: ScanSource { noise_sigma: sigma, ..scan.source.clone() } }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{generate_shape, ShapeSpec};

    fn box_cloud() -> LabeledCloud {
        generate_shape(&ShapeSpec { primitive_count_range: (6, 6), type_mix: [1.0, 0.0, 0.0, 0.0], seed: 1, ..ShapeSpec::default() })
            .unwrap()
    }

    #[test]
    fn ratio_three_quarters_keeps_exactly_target() {
        let cloud = box_cloud();
        let kept = crop_mask(&cloud.points, &Vec3::x(), 0.75);
        assert_eq!(kept.iter().filter(|k| **k).count(), 2048);
        let scan = make_partial(&cloud, "box", 0.75, 4, 2048).unwrap();
        assert_eq!(scan.points.len(), 2048);
        assert!(scan.points.iter().all(|p| cloud.points.contains(p)));
        assert!(matches!(make_partial(&cloud, "box", 0.8, 4, 2048), Err(SceneError::TooFewPoints { .. })));
    }

    #[test]
    fn removed_region_is_a_half_space() {
        let cloud = box_cloud();
        let dir = Vec3::new(0.3, -0.5, 0.8).normalize();
        let kept = crop_mask(&cloud.points, &dir, 0.25);
        let cut = cloud.points.iter().zip(&kept).filter(|(_, k)| !**k).map(|(p, _)| p.dot(&dir)).fold(f64::INFINITY, f64::min);
        let stay = cloud.points.iter().zip(&kept).filter(|(_, k)| **k).map(|(p, _)| p.dot(&dir)).fold(f64::NEG_INFINITY, f64::max);
        assert!(stay <= cut);
    }

    #[test]
    fn noise_statistics() {
        let scan = PartialScan {
            points: vec![Vec3::zeros(); 10_000],
            source: ScanSource { shape_id: "z".into(), ratio: 0.5, crop_seed: 0, noise_sigma: 0.0 },
        };
        assert_eq!(add_noise(&scan, 0.0, 1).points, scan.points);
        let noisy = add_noise(&scan, 0.01, 1);
        assert_eq!(noisy.source.noise_sigma, 0.01);
        let rms = (noisy.points.iter().map(|p| p.norm_squared()).sum::<f64>() / 30_000.0).sqrt();
        assert!((rms - 0.01).abs() < 0.001, "rms {rms}");
        assert_eq!(noisy, add_noise(&scan, 0.01, 1));
    }

    #[test]
    fn fps_spreads_points() {
        let pts: Vec<Vec3> = (0..11).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        assert_eq!(farthest_point_sample(&pts, 3, 0), vec![0, 10, 5]);
    }
}
