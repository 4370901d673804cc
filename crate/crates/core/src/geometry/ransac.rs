use nalgebra::{Matrix4, Vector4};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{fit_quadric, BoundedPrimitive, PrimitiveType, Quadric, Shape, Vec3};
use crate::spatial::KdTree;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RansacConfig {
    /// Inlier distance threshold.
    pub epsilon: f64,
    pub min_support: usize,
    pub max_primitives: usize,
    /// Candidate rounds per extracted primitive.
    pub iterations: usize,
    /// Size of the local neighborhood minimal sets are drawn from.
    pub neighborhood: usize,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig { epsilon: 0.01, min_support: 50, max_primitives: 32, iterations: 200, neighborhood: 64, seed: 0 }
    }
}

/// Sequential greedy RANSAC over planes, spheres, cylinders and cones.
///
/// Each round draws local minimal sets (3 points for a plane, 4 for a sphere,
/// 9 for a general quadric that must classify as cylinder or cone), keeps the
/// candidate with the most inliers, refits it on its inliers and removes them.
pub fn ransac_extract(points: &[Vec3], cfg: &RansacConfig) -> Vec<BoundedPrimitive> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut remaining: Vec<usize> = (0..points.len()).collect();
    let mut out = Vec::new();
    let min_support = cfg.min_support.max(9);
    while out.len() < cfg.max_primitives && remaining.len() >= min_support {
        let local: Vec<Vec3> = remaining.iter().map(|&i| points[i]).collect();
        let tree = KdTree::new(&local);
        let k = cfg.neighborhood.clamp(9, local.len());
        let mut best: Option<(Quadric, usize)> = None;
        for _ in 0..cfg.iterations {
            let seed_idx = rng.random_range(0..local.len());
            let hood: Vec<usize> = tree.knn(&local[seed_idx], k).into_iter().map(|(i, _)| i).collect();
            for ty in [PrimitiveType::Plane, PrimitiveType::Sphere, PrimitiveType::Cylinder] {
                let Some(candidate) = propose(ty, &local, &hood, &mut rng) else { continue };
                let count = local.iter().filter(|p| is_inlier(&candidate, p, cfg.epsilon)).count();
                if best.as_ref().is_none_or(|(_, c)| count > *c) {
                    best = Some((candidate, count));
                }
            }
        }
        let Some((candidate, count)) = best else { break };
        if count < cfg.min_support {
            break;
        }
        let inliers: Vec<usize> = (0..local.len()).filter(|&i| is_inlier(&candidate, &local[i], cfg.epsilon)).collect();
        let support: Vec<Vec3> = inliers.iter().map(|&i| local[i]).collect();
        let quadric = refit(&candidate, &support).unwrap_or(candidate);
        // keep the refit only if it explains the same evidence
        let quadric = if support.iter().all(|p| is_inlier(&quadric, p, cfg.epsilon)) { quadric } else { candidate };
        let taken: std::collections::HashSet<usize> = inliers.iter().copied().collect();
        remaining = remaining.into_iter().enumerate().filter(|(i, _)| !taken.contains(i)).map(|(_, g)| g).collect();
        if let Some(bp) = BoundedPrimitive::new(quadric, support) {
            out.push(bp);
        }
    }
    out
}

fn is_inlier(q: &Quadric, p: &Vec3, eps: f64) -> bool {
    q.distance_or_fallback(p) < eps
}

fn propose(ty: PrimitiveType, pts: &[Vec3], hood: &[usize], rng: &mut impl Rng) -> Option<Quadric> {
    let n = match ty {
        PrimitiveType::Plane => 3,
        PrimitiveType::Sphere => 4,
        _ => 9,
    };
    if hood.len() < n {
        return None;
    }
    let chosen: Vec<Vec3> = sample_indices(rng, hood.len(), n).into_iter().map(|i| pts[hood[i]]).collect();
    match ty {
        PrimitiveType::Plane => {
            let normal = (chosen[1] - chosen[0]).cross(&(chosen[2] - chosen[0]));
            let len = normal.norm();
            if len < 1e-12 {
                return None;
            }
            let normal = normal / len;
            Some(Shape::Plane { normal, offset: -normal.dot(&chosen[0]) }.to_quadric())
        }
        PrimitiveType::Sphere => sphere_through(&chosen),
        _ => {
            let fit = fit_quadric(&chosen, None).ok()?;
            if fit.rank_deficient {
                return None;
            }
            matches!(fit.quadric.type_tag(), PrimitiveType::Cylinder | PrimitiveType::Cone).then_some(fit.quadric)
        }
    }
}

/// Sphere x² + y² + z² + Dx + Ey + Fz + G = 0 through four points.
fn sphere_through(p: &[Vec3]) -> Option<Quadric> {
    let mut m = Matrix4::zeros();
    let mut rhs = Vector4::zeros();
    for (r, q) in p.iter().take(4).enumerate() {
        m[(r, 0)] = q.x;
        m[(r, 1)] = q.y;
        m[(r, 2)] = q.z;
        m[(r, 3)] = 1.0;
        rhs[r] = -q.norm_squared();
    }
    if m.determinant().abs() < 1e-12 {
        return None;
    }
    let s = m.lu().solve(&rhs)?;
    let center = Vec3::new(-s[0] / 2.0, -s[1] / 2.0, -s[2] / 2.0);
    let r2 = center.norm_squared() - s[3];
    (r2 > 0.0 && r2 < 1e4).then(|| Shape::Sphere { center, radius: r2.sqrt() }.to_quadric())
}

fn refit(candidate: &Quadric, support: &[Vec3]) -> Option<Quadric> {
    let ty = candidate.type_tag();
    let fit = match ty {
        PrimitiveType::Plane | PrimitiveType::Sphere => fit_quadric(support, Some(ty)).ok()?,
        _ => {
            let f = fit_quadric(support, None).ok()?;
            if f.quadric.type_tag() != ty {
                return None;
            }
            f
        }
    };
    (!fit.rank_deficient).then_some(fit.quadric)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_plane(z: f64, n: usize) -> Vec<Vec3> {
        let side = (n as f64).sqrt().ceil() as usize;
        (0..n)
            .map(|i| Vec3::new((i % side) as f64 / side as f64, (i / side) as f64 / side as f64 + 0.013 * (i % 3) as f64, z))
            .collect()
    }

    #[test]
    fn two_parallel_planes() {
        let mut pts = grid_plane(0.0, 200);
        pts.extend(grid_plane(0.5, 200));
        let prims = ransac_extract(&pts, &RansacConfig::default());
        assert_eq!(prims.len(), 2);
        for bp in &prims {
            assert_eq!(bp.quadric.type_tag(), PrimitiveType::Plane);
            let worst = bp.support.iter().map(|p| bp.quadric.distance(p).unwrap()).fold(0.0, f64::max);
            assert!(worst < 1e-6);
            assert_eq!(bp.support.len(), 200);
        }
    }

    #[test]
    fn sphere_samples_give_one_sphere() {
        let sphere = Shape::Sphere { center: Vec3::new(0.1, 0.2, 0.0), radius: 0.4 }.to_quadric();
        let bp = BoundedPrimitive { quadric: sphere, support: vec![], extent: super::super::Aabb { min: [-1.0; 3], max: [1.0; 3] } };
        let pts = super::super::sample_surface(&bp, 500, 9).unwrap();
        let prims = ransac_extract(&pts, &RansacConfig::default());
        assert_eq!(prims.len(), 1);
        assert_eq!(prims[0].quadric.classify(), PrimitiveType::Sphere);
    }

    #[test]
    fn too_few_points_yield_nothing() {
        let pts = grid_plane(0.0, 20);
        assert!(ransac_extract(&pts, &RansacConfig::default()).is_empty());
    }
}
