use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::shape::{orthonormal_basis, APEX_EXCLUSION};
use super::{project, GeometryError, Quadric, Shape, Vec3};

/// Slack used when testing extent membership of sampled points.
pub const EXTENT_TOL: f64 = 1e-9;

/// Axis-aligned bounding box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn of_points<'a>(points: impl IntoIterator<Item = &'a Vec3>) -> Option<Aabb> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = Aabb { min: [first.x, first.y, first.z], max: [first.x, first.y, first.z] };
        for p in it {
            for k in 0..3 {
                b.min[k] = b.min[k].min(p[k]);
                b.max[k] = b.max[k].max(p[k]);
            }
        }
        Some(b)
    }

    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        (0..3).all(|k| p[k] >= self.min[k] - tol && p[k] <= self.max[k] + tol)
    }

    pub fn center(&self) -> Vec3 {
        Vec3::new(
            (self.min[0] + self.max[0]) / 2.0,
            (self.min[1] + self.max[1]) / 2.0,
            (self.min[2] + self.max[2]) / 2.0,
        )
    }

    pub fn half_diagonal(&self) -> f64 {
        let d = Vec3::new(self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]);
        d.norm() / 2.0
    }

    pub fn corners(&self) -> [Vec3; 8] {
        std::array::from_fn(|i| {
            Vec3::new(
                if i & 1 == 0 { self.min[0] } else { self.max[0] },
                if i & 2 == 0 { self.min[1] } else { self.max[1] },
                if i & 4 == 0 { self.min[2] } else { self.max[2] },
            )
        })
    }

    pub fn expanded(&self, margin: f64) -> Aabb {
        Aabb { min: self.min.map(|v| v - margin), max: self.max.map(|v| v + margin) }
    }
}

/// A quadric restricted to the region where it has inlier evidence.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundedPrimitive {
    pub quadric: Quadric,
    pub support: Vec<Vec3>,
    pub extent: Aabb,
}

impl BoundedPrimitive {
    /// Builds a bounded primitive whose extent is the bounding box of `support`.
    /// Returns `None` for an empty support.
    pub fn new(quadric: Quadric, support: Vec<Vec3>) -> Option<Self> {
        let extent = Aabb::of_points(&support)?;
        Some(BoundedPrimitive { quadric, support, extent })
    }
}

/// Draws `n` points uniformly from the part of the primitive's surface inside
/// its extent, by rejection from the parametric surface.
///
/// Quadrics whose coefficients only approximate their tagged family are
/// sampled on the snapped parametric surface and projected back onto the
/// actual quadric.
pub fn sample_surface(bp: &BoundedPrimitive, n: usize, seed: u64) -> Result<Vec<Vec3>, GeometryError> {
    let q = &bp.quadric;
    let shape = q.shape().ok_or(GeometryError::NotParametric(q.type_tag()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extent = &bp.extent;
    let sampler = SurfaceSampler::new(&shape, extent);
    let mut out = Vec::with_capacity(n);
    let max_attempts = 10_000 * n.max(1);
    let mut attempts = 0usize;
    while out.len() < n {
        if attempts >= 10 * n.max(1) && out.is_empty() || attempts >= max_attempts {
            return Err(GeometryError::EmptyIntersection);
        }
        attempts += 1;
        let Some(mut p) = sampler.draw(&mut rng) else { continue };
        if q.distance_or_fallback(&p) > 1e-9 {
            match project(&p, q) {
                Ok(x) => p = x,
                Err(_) => continue,
            }
        }
        if extent.contains(&p, EXTENT_TOL) {
            out.push(p);
        }
    }
    Ok(out)
}

/// Uniform area sampler of a parametric surface over a region covering an extent.
pub(crate) struct SurfaceSampler {
    shape: Shape,
    e1: Vec3,
    e2: Vec3,
    origin: Vec3,
    lo: f64,
    hi: f64,
    half: f64,
}

impl SurfaceSampler {
    pub fn new(shape: &Shape, extent: &Aabb) -> Self {
        let corners = extent.corners();
        let (origin, axis) = match *shape {
            Shape::Plane { normal, offset } => {
                let c = extent.center();
                (c - normal * (normal.dot(&c) + offset), normal)
            }
            Shape::Sphere { center, .. } => (center, Vec3::z()),
            Shape::Cylinder { point, axis, .. } => (point, axis),
            Shape::Cone { apex, axis, .. } => (apex, axis),
        };
        let (e1, e2) = orthonormal_basis(&axis);
        let proj: Vec<f64> = corners.iter().map(|c| (c - origin).dot(&axis)).collect();
        let lo = proj.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = proj.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        SurfaceSampler { shape: *shape, e1, e2, origin, lo, hi, half: extent.half_diagonal() + EXTENT_TOL }
    }

    /// Approximate area of the sampling domain.
    pub fn area(&self) -> f64 {
        match self.shape {
            Shape::Plane { .. } => 4.0 * self.half * self.half,
            Shape::Sphere { radius, .. } => 4.0 * std::f64::consts::PI * radius * radius,
            Shape::Cylinder { radius, .. } => std::f64::consts::TAU * radius * (self.hi - self.lo).max(0.0),
            Shape::Cone { half_angle, .. } => {
                // lateral area between axial heights lo and hi (both nappes)
                let k = std::f64::consts::PI * half_angle.tan() / half_angle.cos();
                let seg = |a: f64, b: f64| k * (b * b - a * a).abs();
                if self.lo >= 0.0 || self.hi <= 0.0 {
                    seg(self.lo.abs().min(self.hi.abs()), self.lo.abs().max(self.hi.abs()))
                } else {
                    seg(0.0, -self.lo) + seg(0.0, self.hi)
                }
            }
        }
    }

    pub fn draw(&self, rng: &mut impl Rng) -> Option<Vec3> {
        match self.shape {
            Shape::Plane { .. } => {
                let u = rng.random_range(-self.half..=self.half);
                let v = rng.random_range(-self.half..=self.half);
                Some(self.origin + self.e1 * u + self.e2 * v)
            }
            Shape::Sphere { center, radius } => {
                let g = Vec3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
                let n = g.norm();
                (n > 1e-12).then(|| center + g * (radius / n))
            }
            Shape::Cylinder { point, axis, radius } => {
                if self.hi <= self.lo {
                    return None;
                }
                let t = rng.random_range(self.lo..=self.hi);
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                Some(point + axis * t + (self.e1 * phi.cos() + self.e2 * phi.sin()) * radius)
            }
            Shape::Cone { apex, axis, half_angle } => {
                if self.hi <= self.lo {
                    return None;
                }
                let t = rng.random_range(self.lo..=self.hi);
                let tmax = self.lo.abs().max(self.hi.abs());
                // area density grows linearly with axial distance from the apex
                if rng.random_range(0.0..=tmax) > t.abs() {
                    return None;
                }
                let r = t.abs() * half_angle.tan();
                if (t * t + r * r).sqrt() < APEX_EXCLUSION {
                    return None;
                }
                let phi = rng.random_range(0.0..std::f64::consts::TAU);
                Some(apex + axis * t + (self.e1 * phi.cos() + self.e2 * phi.sin()) * r)
            }
        }
    }
}
