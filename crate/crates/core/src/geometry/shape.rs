use nalgebra::Matrix3;

use super::quadric::{canonical_direction, pseudo_center, COEFF_ZERO};
use super::{PrimitiveType, Quadric, Vec3};

/// Radius of the excluded neighborhood around a cone apex.
pub const APEX_EXCLUSION: f64 = 1e-6;

/// Explicit parametric form of the supported primitive families.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Shape {
    /// `normal · x + offset = 0`, unit normal.
    Plane { normal: Vec3, offset: f64 },
    Sphere { center: Vec3, radius: f64 },
    /// Infinite circular cylinder through `point` along unit `axis`.
    Cylinder { point: Vec3, axis: Vec3, radius: f64 },
    /// Double circular cone with the given apex, unit axis and half-angle (radians).
    Cone { apex: Vec3, axis: Vec3, half_angle: f64 },
}

impl Shape {
    pub fn primitive_type(&self) -> PrimitiveType {
        match self {
            Shape::Plane { .. } => PrimitiveType::Plane,
            Shape::Sphere { .. } => PrimitiveType::Sphere,
            Shape::Cylinder { .. } => PrimitiveType::Cylinder,
            Shape::Cone { .. } => PrimitiveType::Cone,
        }
    }

    /// Exact quadric of this shape, tagged with its family.
    pub fn to_quadric(&self) -> Quadric {
        let (block, b, c) = match *self {
            Shape::Plane { normal, offset } => (Matrix3::zeros(), normal * 0.5, offset),
            Shape::Sphere { center, radius } => {
                (Matrix3::identity(), -center, center.norm_squared() - radius * radius)
            }
            Shape::Cylinder { point, axis, radius } => {
                let p = Matrix3::identity() - axis * axis.transpose();
                let pb = p * point;
                (p, -pb, point.dot(&pb) - radius * radius)
            }
            Shape::Cone { apex, axis, half_angle } => {
                let cos2 = half_angle.cos().powi(2);
                let q = Matrix3::identity() * cos2 - axis * axis.transpose();
                let qa = q * apex;
                (q, -qa, apex.dot(&qa))
            }
        };
        let coeffs = [
            block[(0, 0)],
            block[(1, 1)],
            block[(2, 2)],
            c,
            block[(0, 1)],
            block[(0, 2)],
            b.x,
            block[(1, 2)],
            b.y,
            b.z,
        ];
        Quadric::with_type(coeffs, self.primitive_type()).expect("parametric shapes have nonzero coefficients")
    }

    /// Interprets a quadric under its type tag. Returns `None` when the
    /// coefficients cannot describe a real member of that family.
    pub fn from_quadric(q: &Quadric) -> Option<Shape> {
        let b = q.linear();
        let c = q.constant();
        match q.type_tag() {
            PrimitiveType::Plane => {
                let n = 2.0 * b;
                let len = n.norm();
                (len > COEFF_ZERO).then(|| Shape::Plane { normal: n / len, offset: c / len })
            }
            PrimitiveType::Sphere => {
                let s = q.block().trace() / 3.0;
                if s.abs() < COEFF_ZERO {
                    return None;
                }
                let center = -b / s;
                let r2 = center.norm_squared() - c / s;
                (r2 > 0.0).then(|| Shape::Sphere { center, radius: r2.sqrt() })
            }
            PrimitiveType::Cylinder => {
                let spec = q.spectrum();
                let iz = spec.smallest_abs();
                let lam = (spec.values[(iz + 1) % 3] + spec.values[(iz + 2) % 3]) / 2.0;
                if lam.abs() < COEFF_ZERO {
                    return None;
                }
                let point = pseudo_center(&spec, &b, Some(iz));
                let r2 = -(c + b.dot(&point)) / lam;
                (r2 > 0.0).then(|| Shape::Cylinder {
                    point,
                    axis: canonical_direction(spec.vectors[iz]),
                    radius: r2.sqrt(),
                })
            }
            PrimitiveType::Cone => {
                let spec = q.spectrum();
                let odd = spec.odd_one();
                let mu = (spec.values[(odd + 1) % 3] + spec.values[(odd + 2) % 3]) / 2.0;
                let nu = spec.values[odd];
                if mu.abs() < COEFF_ZERO || spec.values.iter().any(|v| v.abs() < COEFF_ZERO) {
                    return None;
                }
                let tan2 = -nu / mu;
                if tan2 <= 0.0 {
                    return None;
                }
                let apex = pseudo_center(&spec, &b, None);
                Some(Shape::Cone {
                    apex,
                    axis: canonical_direction(spec.vectors[odd]),
                    half_angle: tan2.sqrt().atan(),
                })
            }
            PrimitiveType::Null => None,
        }
    }

    /// Exact Euclidean distance to the surface.
    pub fn distance(&self, p: &Vec3) -> f64 {
        match *self {
            Shape::Plane { normal, offset } => (normal.dot(p) + offset).abs(),
            Shape::Sphere { center, radius } => ((p - center).norm() - radius).abs(),
            Shape::Cylinder { point, axis, radius } => {
                let v = p - point;
                ((v - axis * v.dot(&axis)).norm() - radius).abs()
            }
            Shape::Cone { .. } => (self.foot_point(p).map(|f| (f - p).norm())).unwrap_or_else(|| {
                // p on the axis at the apex side: distance to apex
                match *self {
                    Shape::Cone { apex, .. } => (p - apex).norm(),
                    _ => unreachable!(),
                }
            }),
        }
    }

    /// Closest surface point. `None` when the foot point is not unique in a
    /// degenerate way (sphere center, cylinder axis, cone apex).
    pub fn foot_point(&self, p: &Vec3) -> Option<Vec3> {
        match *self {
            Shape::Plane { normal, offset } => Some(p - normal * (normal.dot(p) + offset)),
            Shape::Sphere { center, radius } => {
                let v = p - center;
                let n = v.norm();
                (n > COEFF_ZERO).then(|| center + v * (radius / n))
            }
            Shape::Cylinder { point, axis, radius } => {
                let v = p - point;
                let along = axis * v.dot(&axis);
                let radial = v - along;
                let n = radial.norm();
                (n > COEFF_ZERO).then(|| point + along + radial * (radius / n))
            }
            Shape::Cone { apex, axis, half_angle } => {
                let v = p - apex;
                let h = v.dot(&axis);
                let radial = v - axis * h;
                let rho = radial.norm();
                let u = if rho > COEFF_ZERO { radial / rho } else { any_perpendicular(&axis) };
                let (s, c) = half_angle.sin_cos();
                // generators (c, s) and (-c, s) in the (h, rho) half-plane
                let t_pos = (h * c + rho * s).max(0.0);
                let t_neg = (-h * c + rho * s).max(0.0);
                let d_pos = (h - t_pos * c).powi(2) + (rho - t_pos * s).powi(2);
                let d_neg = (h + t_neg * c).powi(2) + (rho - t_neg * s).powi(2);
                let (t, sign) = if d_neg < d_pos { (t_neg, -1.0) } else { (t_pos, 1.0) };
                if t < APEX_EXCLUSION {
                    return None;
                }
                Some(apex + axis * (sign * t * c) + u * (t * s))
            }
        }
    }

    /// Applies x ↦ scale·(x − center).
    pub fn normalized(&self, center: &Vec3, scale: f64) -> Shape {
        match *self {
            Shape::Plane { normal, offset } => {
                // n·x + o = 0 with x = y/s + c  ->  n·y + s(n·c + o) = 0
                Shape::Plane { normal, offset: scale * (normal.dot(center) + offset) }
            }
            Shape::Sphere { center: c, radius } => Shape::Sphere { center: (c - center) * scale, radius: radius * scale },
            Shape::Cylinder { point, axis, radius } => Shape::Cylinder {
                point: (point - center) * scale,
                axis,
                radius: radius * scale,
            },
            Shape::Cone { apex, axis, half_angle } => Shape::Cone { apex: (apex - center) * scale, axis, half_angle },
        }
    }
}

/// Deterministic unit vector orthogonal to `v`.
pub fn any_perpendicular(v: &Vec3) -> Vec3 {
    let helper = if v.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    v.cross(&helper).normalize()
}

/// Orthonormal pair spanning the plane orthogonal to unit `v`.
pub fn orthonormal_basis(v: &Vec3) -> (Vec3, Vec3) {
    let e1 = any_perpendicular(v);
    (e1, v.cross(&e1))
}
