use nalgebra::{Quaternion, Rotation3, UnitQuaternion};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, LogNormal, StandardNormal};

use super::{LabeledCloud, SceneError, ShapeSpec};
use crate::geometry::sample::SurfaceSampler;
use crate::geometry::shape::any_perpendicular;
use crate::geometry::{Aabb, Quadric, Shape, Vec3};

pub const DEFAULT_POINT_COUNT: usize = 8192;
/// Primitives with fewer sampled points than this are dropped.
pub const MIN_PRIMITIVE_SUPPORT: usize = 16;

const MAX_ATTEMPTS: usize = 100;
const TYPE_DRAWS: usize = 20;
const COUNT_MEDIAN: f64 = 7.0;
const COUNT_SIGMA: f64 = 0.45;
const BOUNDARY_EPS: f64 = 1e-6;
const DRAWS_PER_POINT: usize = 4000;
/// A composite accepting fewer than one draw in this many is abandoned.
const MAX_REJECTION: usize = 200;
const MIN_DRAWS: usize = 20_000;

/// Generates one labeled composite shape, normalized into the unit cube
/// centered at the origin.
///
/// A convex base solid (box, prism, tetrahedron, capped cylinder, frustum,
/// cone, hemisphere or ball) is decorated with chamfers, holes, bosses,
/// domes, pockets, countersinks and spikes until the drawn primitive count and
/// type mix are used up. Surface points are drawn uniformly by area from every
/// primitive and kept where they lie on the composite boundary.
pub fn generate_shape(spec: &ShapeSpec) -> Result<LabeledCloud, SceneError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (lo, hi) = spec.primitive_count_range;
    let count_dist = LogNormal::new(COUNT_MEDIAN.ln(), COUNT_SIGMA).expect("valid lognormal");
    let type_dist = WeightedIndex::new(spec.type_mix).map_err(|e| SceneError::InvalidSpec(e.to_string()))?;
    for _ in 0..MAX_ATTEMPTS {
        let n = (count_dist.sample(&mut rng).round() as usize).clamp(lo, hi);
        let Some(counts) = (0..TYPE_DRAWS).find_map(|_| {
            let mut c = [0usize; 4];
            for _ in 0..n {
                c[type_dist.sample(&mut rng)] += 1;
            }
            Base::feasible(&c).then_some(c)
        }) else {
            continue;
        };
        let csg = build(counts, &mut rng);
        if let Some(cloud) = realize(&csg, n, spec.point_count, &mut rng) {
            return Ok(cloud);
        }
    }
    Err(SceneError::SpecInfeasible { attempts: MAX_ATTEMPTS })
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Op {
    Intersect,
    Union,
    Difference,
}

/// Solid bounded by a primitive surface. Planes keep the side their normal
/// points away from; cones keep the nappe their axis points into.
fn inside_solid(shape: &Shape, p: &Vec3) -> bool {
    match *shape {
        Shape::Plane { normal, offset } => normal.dot(p) + offset <= 0.0,
        Shape::Sphere { center, radius } => (p - center).norm() <= radius,
        Shape::Cylinder { point, axis, radius } => {
            let d = p - point;
            (d - axis * d.dot(&axis)).norm() <= radius
        }
        Shape::Cone { apex, axis, half_angle } => {
            let d = p - apex;
            let t = d.dot(&axis);
            t >= 0.0 && (d - axis * t).norm() <= t * half_angle.tan()
        }
    }
}

struct Csg {
    prims: Vec<Shape>,
    quadrics: Vec<Quadric>,
    base: Vec<usize>,
    features: Vec<(Op, Vec<usize>)>,
    bbox: Aabb,
    size: f64,
}

impl Csg {
    fn new(shapes: Vec<Shape>, bbox: Aabb) -> Csg {
        let base = (0..shapes.len()).collect();
        let size = bbox.half_diagonal();
        let quadrics = shapes.iter().map(Shape::to_quadric).collect();
        Csg { prims: shapes, quadrics, base, features: Vec::new(), bbox, size }
    }

    fn add_feature(&mut self, op: Op, shapes: Vec<Shape>) {
        let start = self.prims.len();
        for s in shapes {
            self.quadrics.push(s.to_quadric());
            self.prims.push(s);
        }
        self.features.push((op, (start..self.prims.len()).collect()));
    }

    fn inside(&self, p: &Vec3) -> bool {
        let all = |ids: &[usize]| ids.iter().all(|&i| inside_solid(&self.prims[i], p));
        let mut s = all(&self.base);
        for (op, ids) in &self.features {
            s = match op {
                Op::Intersect => s && all(ids),
                Op::Union => s || all(ids),
                Op::Difference => s && !all(ids),
            };
        }
        s
    }

    /// Outward unit normal if `p` (on primitive `i`) lies on the composite boundary.
    fn boundary_normal(&self, i: usize, p: &Vec3) -> Option<Vec3> {
        let n = self.quadrics[i].normal(p)?;
        let outside_plus = !self.inside(&(p + n * BOUNDARY_EPS));
        let outside_minus = !self.inside(&(p - n * BOUNDARY_EPS));
        match (outside_plus, outside_minus) {
            (true, false) => Some(n),
            (false, true) => Some(-n),
            _ => None,
        }
    }

    /// Uniform-by-area boundary samples restricted to the `active` primitives.
    fn sample_boundary(&self, active: &[usize], n: usize, rng: &mut impl Rng) -> Option<Vec<(Vec3, usize)>> {
        let samplers: Vec<SurfaceSampler> = active.iter().map(|&i| SurfaceSampler::new(&self.prims[i], &self.bbox)).collect();
        let weights: Vec<f64> = samplers.iter().map(|s| s.area().max(0.0)).collect();
        let pick = WeightedIndex::new(&weights).ok()?;
        let mut out = Vec::with_capacity(n);
        for draws in 0..DRAWS_PER_POINT * n.max(1) {
            if out.len() == n {
                break;
            }
            if draws >= MIN_DRAWS && out.len() * MAX_REJECTION < draws {
                return None;
            }
            let j = pick.sample(rng);
            let Some(p) = samplers[j].draw(rng) else { continue };
            if self.bbox.contains(&p, 0.0) && self.boundary_normal(active[j], &p).is_some() {
                out.push((p, active[j]));
            }
        }
        (out.len() == n).then_some(out)
    }

    fn anchor(&self, rng: &mut impl Rng) -> Option<(Vec3, Vec3)> {
        let all: Vec<usize> = (0..self.prims.len()).collect();
        let (p, i) = self.sample_boundary(&all, 1, rng)?[0];
        Some((p, self.boundary_normal(i, &p)?))
    }
}

#[derive(Debug, Clone, Copy)]
enum Base {
    Box,
    Prism,
    Tetrahedron,
    CappedCylinder,
    Frustum,
    ConeSolid,
    Hemisphere,
    Ball,
}

impl Base {
    const ALL: [(Base, f64); 8] = [
        (Base::Box, 4.0),
        (Base::Prism, 2.0),
        (Base::Tetrahedron, 1.0),
        (Base::CappedCylinder, 2.0),
        (Base::Frustum, 1.0),
        (Base::ConeSolid, 1.0),
        (Base::Hemisphere, 1.0),
        (Base::Ball, 1.0),
    ];

    /// Primitives consumed, as plane/cylinder/sphere/cone counts.
    fn uses(self) -> [usize; 4] {
        match self {
            Base::Box => [6, 0, 0, 0],
            Base::Prism => [5, 0, 0, 0],
            Base::Tetrahedron => [4, 0, 0, 0],
            Base::CappedCylinder => [2, 1, 0, 0],
            Base::Frustum => [2, 0, 0, 1],
            Base::ConeSolid => [1, 0, 0, 1],
            Base::Hemisphere => [1, 0, 1, 0],
            Base::Ball => [0, 0, 1, 0],
        }
    }

    fn fits(self, counts: &[usize; 4]) -> bool {
        self.uses().iter().zip(counts).all(|(u, c)| u <= c)
    }

    fn feasible(counts: &[usize; 4]) -> bool {
        Base::ALL.iter().any(|(b, _)| b.fits(counts))
    }
}

fn uniform_rotation(rng: &mut impl Rng) -> Rotation3<f64> {
    let q = Quaternion::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal));
    UnitQuaternion::from_quaternion(q).to_rotation_matrix()
}

fn rotate(shape: &Shape, r: &Rotation3<f64>) -> Shape {
    match *shape {
        Shape::Plane { normal, offset } => Shape::Plane { normal: r * normal, offset },
        Shape::Sphere { center, radius } => Shape::Sphere { center: r * center, radius },
        Shape::Cylinder { point, axis, radius } => Shape::Cylinder { point: r * point, axis: r * axis, radius },
        Shape::Cone { apex, axis, half_angle } => Shape::Cone { apex: r * apex, axis: r * axis, half_angle },
    }
}

/// Plane through `q` whose normal `n` points out of the kept half-space.
fn plane_through(q: Vec3, n: Vec3) -> Shape {
    Shape::Plane { normal: n, offset: -n.dot(&q) }
}

fn base_solid(base: Base, rng: &mut impl Rng) -> (Vec<Shape>, Vec<Vec3>) {
    let z = Vec3::z();
    match base {
        Base::Box => {
            let h = Vec3::new(rng.random_range(0.3..0.7), rng.random_range(0.3..0.7), rng.random_range(0.3..0.7));
            let mut shapes = Vec::new();
            for k in 0..3 {
                let mut e = Vec3::zeros();
                e[k] = 1.0;
                shapes.push(plane_through(e * h[k], e));
                shapes.push(plane_through(-e * h[k], -e));
            }
            let hull = (0..8).map(|i| Vec3::new(sgn(i, 1) * h.x, sgn(i, 2) * h.y, sgn(i, 4) * h.z)).collect();
            (shapes, hull)
        }
        Base::Prism => {
            let h = rng.random_range(0.3..0.7);
            let verts: Vec<Vec3> = (0..3)
                .map(|k| {
                    let a = std::f64::consts::TAU * k as f64 / 3.0 + rng.random_range(-0.3..0.3);
                    Vec3::new(a.cos(), a.sin(), 0.0) * rng.random_range(0.5..0.8)
                })
                .collect();
            let mut shapes = vec![plane_through(z * h, z), plane_through(-z * h, -z)];
            for k in 0..3 {
                let (a, b) = (verts[k], verts[(k + 1) % 3]);
                let mut n = (b - a).cross(&z).normalize();
                if n.dot(&a) < 0.0 {
                    n = -n;
                }
                shapes.push(plane_through(a, n));
            }
            let hull = verts.iter().flat_map(|v| [v + z * h, v - z * h]).collect();
            (shapes, hull)
        }
        Base::Tetrahedron => {
            let verts: Vec<Vec3> = [[1.0, 1.0, 1.0], [1.0, -1.0, -1.0], [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]
                .iter()
                .map(|v| Vec3::new(v[0], v[1], v[2]) * rng.random_range(0.4..0.7) + jitter(rng, 0.1))
                .collect();
            let centroid = verts.iter().sum::<Vec3>() / 4.0;
            let shapes = (0..4)
                .map(|k| {
                    let f: Vec<Vec3> = (0..4).filter(|&j| j != k).map(|j| verts[j]).collect();
                    let mut n = (f[1] - f[0]).cross(&(f[2] - f[0])).normalize();
                    if n.dot(&(f[0] - centroid)) < 0.0 {
                        n = -n;
                    }
                    plane_through(f[0], n)
                })
                .collect();
            (shapes, verts)
        }
        Base::CappedCylinder => {
            let r = rng.random_range(0.3..0.6);
            let h = rng.random_range(0.3..0.7);
            let shapes = vec![
                Shape::Cylinder { point: Vec3::zeros(), axis: z, radius: r },
                plane_through(z * h, z),
                plane_through(-z * h, -z),
            ];
            (shapes, box_hull(Vec3::new(r, r, h)))
        }
        Base::Frustum | Base::ConeSolid => {
            let alpha: f64 = rng.random_range(15f64.to_radians()..35f64.to_radians());
            let rb = rng.random_range(0.4..0.7);
            let tb = rb / alpha.tan();
            let tt = if matches!(base, Base::Frustum) { tb * rng.random_range(0.3..0.6) } else { 0.0 };
            // apex above, solid nappe pointing down; shift the kept slab to mid-height 0
            let apex = z * (tb + tt) / 2.0;
            let mut shapes = vec![
                Shape::Cone { apex, axis: -z, half_angle: alpha },
                plane_through(apex - z * tb, -z),
            ];
            if matches!(base, Base::Frustum) {
                shapes.push(plane_through(apex - z * tt, z));
            }
            (shapes, box_hull(Vec3::new(rb, rb, (tb - tt) / 2.0)))
        }
        Base::Hemisphere => {
            let r = rng.random_range(0.5..0.7);
            let shapes = vec![Shape::Sphere { center: Vec3::zeros(), radius: r }, plane_through(Vec3::zeros(), z)];
            (shapes, box_hull(Vec3::new(r, r, r)))
        }
        Base::Ball => {
            let r = rng.random_range(0.5..0.7);
            (vec![Shape::Sphere { center: Vec3::zeros(), radius: r }], box_hull(Vec3::new(r, r, r)))
        }
    }
}

fn sgn(i: usize, bit: usize) -> f64 {
    if i & bit == 0 {
        -1.0
    } else {
        1.0
    }
}

fn box_hull(h: Vec3) -> Vec<Vec3> {
    (0..8).map(|i| Vec3::new(sgn(i, 1) * h.x, sgn(i, 2) * h.y, sgn(i, 4) * h.z)).collect()
}

fn jitter(rng: &mut impl Rng, s: f64) -> Vec3 {
    Vec3::new(rng.random_range(-s..s), rng.random_range(-s..s), rng.random_range(-s..s))
}

#[derive(Debug, Clone, Copy)]
enum Feature {
    Chamfer,
    Hole,
    Boss,
    Dome,
    Pocket,
    Countersink,
    Spike,
}

fn build(counts: [usize; 4], rng: &mut impl Rng) -> Csg {
    let options: Vec<(Base, f64)> = Base::ALL.iter().copied().filter(|(b, _)| b.fits(&counts)).collect();
    let pick = WeightedIndex::new(options.iter().map(|(_, w)| *w)).expect("at least one feasible base");
    let base = options[pick.sample(rng)].0;
    let mut left = counts;
    for (l, u) in left.iter_mut().zip(base.uses()) {
        *l -= u;
    }
    let rot = uniform_rotation(rng);
    let (shapes, hull) = base_solid(base, rng);
    let shapes = shapes.iter().map(|s| rotate(s, &rot)).collect();
    let hull: Vec<Vec3> = hull.iter().map(|v| rot * v).collect();
    let bbox = Aabb::of_points(&hull).expect("nonempty hull");

    let mut features = Vec::new();
    for _ in 0..left[1] {
        if left[0] > 0 && rng.random_bool(0.5) {
            left[0] -= 1;
            features.push(Feature::Boss);
        } else {
            features.push(Feature::Hole);
        }
    }
    for _ in 0..left[2] {
        features.push(if rng.random_bool(0.5) { Feature::Dome } else { Feature::Pocket });
    }
    for _ in 0..left[3] {
        features.push(if rng.random_bool(0.5) { Feature::Countersink } else { Feature::Spike });
    }
    features.extend(std::iter::repeat_n(Feature::Chamfer, left[0]));
    features.shuffle(rng);

    let mut csg = Csg::new(shapes, bbox);
    let s = csg.size;
    csg.bbox = bbox.expanded(if features.is_empty() { 1e-6 } else { 0.5 * s });
    for f in features {
        let Some((p, n)) = csg.anchor(rng) else { break };
        let r = rng.random_range(0.08..0.18) * s;
        match f {
            Feature::Chamfer => {
                let tilt = any_perpendicular(&n);
                let tilt = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(n), rng.random_range(0.0..std::f64::consts::TAU)) * tilt;
                let m = (n + tilt * rng.random_range(0.3..1.0)).normalize();
                csg.add_feature(Op::Intersect, vec![plane_through(p - n * rng.random_range(0.05..0.15) * s, m)]);
            }
            Feature::Hole => csg.add_feature(Op::Difference, vec![Shape::Cylinder { point: p, axis: n, radius: r }]),
            Feature::Boss => {
                let h = rng.random_range(0.1..0.25) * s;
                csg.add_feature(
                    Op::Union,
                    vec![Shape::Cylinder { point: p, axis: n, radius: r }, plane_through(p + n * h, n), plane_through(p - n * 0.3 * s, -n)],
                );
            }
            Feature::Dome => csg.add_feature(Op::Union, vec![Shape::Sphere { center: p - n * 0.4 * r * 1.5, radius: r * 1.5 }]),
            Feature::Pocket => csg.add_feature(Op::Difference, vec![Shape::Sphere { center: p + n * 0.4 * r * 1.5, radius: r * 1.5 }]),
            Feature::Countersink => {
                let alpha: f64 = rng.random_range(30f64.to_radians()..50f64.to_radians());
                csg.add_feature(Op::Difference, vec![Shape::Cone { apex: p - n * rng.random_range(0.1..0.2) * s, axis: n, half_angle: alpha }]);
            }
            Feature::Spike => {
                let alpha: f64 = rng.random_range(15f64.to_radians()..30f64.to_radians());
                let apex = p + n * rng.random_range(0.15..0.3) * s;
                csg.add_feature(Op::Union, vec![Shape::Cone { apex, axis: -n, half_angle: alpha }, plane_through(p - n * 0.2 * s, -n)]);
            }
        }
    }
    csg
}

/// Samples the composite, keeps it only if exactly `n` primitives carry
/// enough support, and normalizes into the unit cube.
fn realize(csg: &Csg, n: usize, point_count: usize, rng: &mut impl Rng) -> Option<LabeledCloud> {
    let all: Vec<usize> = (0..csg.prims.len()).collect();
    let mut samples = csg.sample_boundary(&all, point_count, rng)?;
    let mut support = vec![0usize; csg.prims.len()];
    for (_, i) in &samples {
        support[*i] += 1;
    }
    let kept: Vec<usize> = all.iter().copied().filter(|&i| support[i] >= MIN_PRIMITIVE_SUPPORT).collect();
    if kept.len() != n {
        return None;
    }
    if kept.iter().map(|&i| support[i]).sum::<usize>() != point_count {
        samples = csg.sample_boundary(&kept, point_count, rng)?;
    }
    let pts: Vec<Vec3> = samples.iter().map(|(p, _)| *p).collect();
    let bbox = Aabb::of_points(&pts)?;
    let center = bbox.center();
    let side = (0..3).map(|k| bbox.max[k] - bbox.min[k]).fold(0.0, f64::max);
    let scale = 1.0 / side;
    let mut label_of = vec![0usize; csg.prims.len()];
    for (g, &i) in kept.iter().enumerate() {
        label_of[i] = g + 1;
    }
    let points = pts.iter().map(|p| (p - center) * scale).collect();
    let labels = samples.iter().map(|(_, i)| label_of[*i]).collect();
    let quadrics = kept.iter().map(|&i| csg.prims[i].normalized(&center, scale).to_quadric()).collect();
    let cloud = LabeledCloud::from_labels(points, labels, quadrics).ok()?;
    let counts = cloud.primitives.iter().map(|bp| bp.support.len());
    counts.clone().all(|c| c >= MIN_PRIMITIVE_SUPPORT).then_some(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PrimitiveType;

    #[test]
    fn plane_only_six_is_a_box() {
        let spec = ShapeSpec { primitive_count_range: (6, 6), type_mix: [1.0, 0.0, 0.0, 0.0], seed: 3, ..ShapeSpec::default() };
        let cloud = generate_shape(&spec).unwrap();
        assert_eq!(cloud.primitives.len(), 6);
        assert_eq!(cloud.points.len(), 8192);
        assert!(cloud.primitives.iter().all(|bp| bp.quadric.type_tag() == PrimitiveType::Plane));
    }

    #[test]
    fn points_lie_on_their_primitive() {
        for seed in 0..5 {
            let cloud = generate_shape(&ShapeSpec { seed, point_count: 2048, ..ShapeSpec::default() }).unwrap();
            for (p, &l) in cloud.points.iter().zip(&cloud.labels) {
                let d = cloud.primitives[l - 1].quadric.distance_or_fallback(p);
                assert!(d < 1e-6, "seed {seed}: distance {d}");
            }
            for p in &cloud.points {
                assert!(p.iter().all(|v| v.abs() <= 0.5 + 1e-12));
            }
        }
    }

    #[test]
    fn same_seed_same_cloud() {
        let spec = ShapeSpec { seed: 11, point_count: 1024, primitive_count_range: (2, 12), ..ShapeSpec::default() };
        assert_eq!(generate_shape(&spec).unwrap(), generate_shape(&spec).unwrap());
    }

    #[test]
    fn infeasible_count_is_reported() {
        let spec = ShapeSpec { primitive_count_range: (2, 3), type_mix: [1.0, 0.0, 0.0, 0.0], ..ShapeSpec::default() };
        assert!(matches!(generate_shape(&spec), Err(SceneError::SpecInfeasible { .. })));
    }
}
