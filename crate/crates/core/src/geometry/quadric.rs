use nalgebra::{Matrix3, Matrix4, SymmetricEigen, Vector3};
use serde::{Deserialize, Serialize};

use super::{GeometryError, Shape};

pub type Vec3 = Vector3<f64>;

/// Coefficients below this magnitude are treated as exact zeros.
pub const COEFF_ZERO: f64 = 1e-12;
/// Relative eigenvalue magnitude under which an eigenvalue of the quadratic block counts as zero.
pub const EIG_ZERO_REL: f64 = 1e-5;
/// Relative tolerance for two same-sign eigenvalues to count as equal.
pub const EIG_EQUAL_REL: f64 = 1e-3;
/// Gradient norm under which the Sampson distance is undefined.
pub const GRAD_EPS: f64 = 1e-9;

/// Weights turning the squared coefficient vector into the squared Frobenius norm of `A`.
pub const FROBENIUS_WEIGHTS: [f64; 10] = [1.0, 1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 2.0, 2.0, 2.0];
/// Positions of the upper-left 3x3 block entries (a11, a22, a33, a12, a13, a23).
pub const QUADRATIC_BLOCK: [usize; 6] = [0, 1, 2, 4, 5, 7];

/// Primitive families. `Null` is the no-object class and never carries geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PrimitiveType {
    Plane,
    Cylinder,
    Sphere,
    Cone,
    Null,
}

impl PrimitiveType {
    pub const ALL: [PrimitiveType; 5] = [
        PrimitiveType::Plane,
        PrimitiveType::Cylinder,
        PrimitiveType::Sphere,
        PrimitiveType::Cone,
        PrimitiveType::Null,
    ];
    pub const GEOMETRIC: [PrimitiveType; 4] = [
        PrimitiveType::Plane,
        PrimitiveType::Cylinder,
        PrimitiveType::Sphere,
        PrimitiveType::Cone,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PrimitiveType::Plane => "plane",
            PrimitiveType::Cylinder => "cylinder",
            PrimitiveType::Sphere => "sphere",
            PrimitiveType::Cone => "cone",
            PrimitiveType::Null => "null",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|t| t.name() == name)
    }

    /// Whether axis error is defined for this family (plane normal or symmetry axis).
    pub fn has_axis(self) -> bool {
        matches!(self, PrimitiveType::Plane | PrimitiveType::Cylinder | PrimitiveType::Cone)
    }

    /// Class index inside a categorical distribution with `type_count` classes.
    ///
    /// Five classes use the order plane, cylinder, sphere, cone, null; the
    /// two-class (plane-only) variant uses plane, null. The null class is
    /// always last.
    pub fn class_index(self, type_count: usize) -> Option<usize> {
        match type_count {
            5 => Some(self as usize),
            2 => match self {
                PrimitiveType::Plane => Some(0),
                PrimitiveType::Null => Some(1),
                _ => None,
            },
            _ => None,
        }
    }

    pub fn from_class_index(index: usize, type_count: usize) -> PrimitiveType {
        if index + 1 >= type_count {
            return PrimitiveType::Null;
        }
        match type_count {
            2 => PrimitiveType::Plane,
            _ => Self::ALL[index],
        }
    }
}

/// Scales a coefficient vector so the symmetric matrix has unit Frobenius norm
/// and its first nonzero coefficient is positive.
pub fn canonicalize(coeffs: &[f64; 10]) -> Result<[f64; 10], GeometryError> {
    if coeffs.iter().all(|c| c.abs() < COEFF_ZERO) {
        return Err(GeometryError::AllZero);
    }
    let norm = frobenius_norm(coeffs);
    let mut out = coeffs.map(|c| c / norm);
    let lead = out.iter().copied().find(|c| c.abs() >= COEFF_ZERO).unwrap_or(1.0);
    if lead < 0.0 {
        out.iter_mut().for_each(|c| *c = -*c);
    }
    Ok(out)
}

pub fn frobenius_norm(coeffs: &[f64; 10]) -> f64 {
    coeffs
        .iter()
        .zip(FROBENIUS_WEIGHTS)
        .map(|(c, w)| w * c * c)
        .sum::<f64>()
        .sqrt()
}

/// L1 distance between two coefficient vectors, minimized over the sign of the
/// second one (`A` and `-A` describe the same surface). Returns the distance and
/// the sign (+1 or -1) applied to `b`.
pub fn sign_invariant_l1(a: &[f64; 10], b: &[f64; 10]) -> (f64, f64) {
    let plus: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
    let minus: f64 = a.iter().zip(b).map(|(x, y)| (x + y).abs()).sum();
    if minus < plus {
        (minus, -1.0)
    } else {
        (plus, 1.0)
    }
}

/// Eigen-decomposition of the quadratic block, sorted by ascending eigenvalue.
#[derive(Debug, Clone)]
pub(crate) struct Spectrum {
    pub values: [f64; 3],
    pub vectors: [Vec3; 3],
}

impl Spectrum {
    fn of(block: &Matrix3<f64>) -> Self {
        let eig = SymmetricEigen::new(*block);
        let mut order = [0usize, 1, 2];
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        Spectrum {
            values: order.map(|i| eig.eigenvalues[i]),
            vectors: order.map(|i| eig.eigenvectors.column(i).into_owned()),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    /// Index of the eigenvalue with the smallest magnitude.
    pub fn smallest_abs(&self) -> usize {
        (0..3)
            .min_by(|&i, &j| self.values[i].abs().total_cmp(&self.values[j].abs()))
            .unwrap_or(0)
    }

    /// Index of the eigenvalue whose sign differs from the other two, or the
    /// one farthest from the mean of the remaining pair when all signs agree.
    pub fn odd_one(&self) -> usize {
        let v = self.values;
        let pos = v.iter().filter(|x| **x > 0.0).count();
        if pos == 1 {
            return (0..3).find(|&i| v[i] > 0.0).unwrap_or(0);
        }
        if pos == 2 {
            return (0..3).find(|&i| v[i] <= 0.0).unwrap_or(0);
        }
        (0..3)
            .max_by(|&i, &j| {
                let others = |k: usize| (v[(k + 1) % 3] + v[(k + 2) % 3]) / 2.0;
                (v[i] - others(i)).abs().total_cmp(&(v[j] - others(j)).abs())
            })
            .unwrap_or(0)
    }
}

/// Canonical sign for orientationless directions: positive z, then y, then x.
pub fn canonical_direction(v: Vec3) -> Vec3 {
    let n = v.normalize();
    let key = if n.z.abs() > COEFF_ZERO {
        n.z
    } else if n.y.abs() > COEFF_ZERO {
        n.y
    } else {
        n.x
    };
    if key < 0.0 {
        -n
    } else {
        n
    }
}

/// A quadric surface `xᵀAx = 0` in homogeneous coordinates with a primitive type tag.
///
/// The ten stored coefficients are the unique entries of the symmetric matrix
/// in the order a11, a22, a33, a44, a12, a13, a14, a23, a24, a34, kept under
/// canonical normalization. Plane-tagged quadrics have a zero quadratic block.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quadric {
    coeffs: [f64; 10],
    type_tag: PrimitiveType,
}

impl Quadric {
    /// Normalizes raw coefficients and tags the result with its classified type.
    pub fn from_coeffs(coeffs: [f64; 10]) -> Result<Self, GeometryError> {
        let coeffs = canonicalize(&coeffs)?;
        let mut q = Quadric { coeffs, type_tag: PrimitiveType::Null };
        q.type_tag = q.classify();
        Ok(q)
    }

    /// Normalizes raw coefficients under a given type tag. A plane tag zeroes
    /// the quadratic block before normalization.
    pub fn with_type(mut coeffs: [f64; 10], type_tag: PrimitiveType) -> Result<Self, GeometryError> {
        if type_tag == PrimitiveType::Plane {
            for i in QUADRATIC_BLOCK {
                coeffs[i] = 0.0;
            }
        }
        Ok(Quadric { coeffs: canonicalize(&coeffs)?, type_tag })
    }

    pub fn from_matrix(m: &Matrix4<f64>, type_tag: PrimitiveType) -> Result<Self, GeometryError> {
        let sym = (m + m.transpose()) * 0.5;
        let c = [
            sym[(0, 0)],
            sym[(1, 1)],
            sym[(2, 2)],
            sym[(3, 3)],
            sym[(0, 1)],
            sym[(0, 2)],
            sym[(0, 3)],
            sym[(1, 2)],
            sym[(1, 3)],
            sym[(2, 3)],
        ];
        Self::with_type(c, type_tag)
    }

    pub fn coeffs(&self) -> &[f64; 10] {
        &self.coeffs
    }

    pub fn type_tag(&self) -> PrimitiveType {
        self.type_tag
    }

    pub fn retagged(&self, type_tag: PrimitiveType) -> Result<Self, GeometryError> {
        Self::with_type(self.coeffs, type_tag)
    }

    pub fn matrix(&self) -> Matrix4<f64> {
        let [a11, a22, a33, a44, a12, a13, a14, a23, a24, a34] = self.coeffs;
        Matrix4::new(
            a11, a12, a13, a14, //
            a12, a22, a23, a24, //
            a13, a23, a33, a34, //
            a14, a24, a34, a44,
        )
    }

    pub(crate) fn block(&self) -> Matrix3<f64> {
        let [a11, a22, a33, _, a12, a13, _, a23, _, _] = self.coeffs;
        Matrix3::new(a11, a12, a13, a12, a22, a23, a13, a23, a33)
    }

    pub(crate) fn linear(&self) -> Vec3 {
        Vec3::new(self.coeffs[6], self.coeffs[8], self.coeffs[9])
    }

    pub(crate) fn constant(&self) -> f64 {
        self.coeffs[3]
    }

    pub(crate) fn spectrum(&self) -> Spectrum {
        Spectrum::of(&self.block())
    }

    /// xᵀAx with x = (p, 1).
    pub fn evaluate(&self, p: &Vec3) -> f64 {
        let [a11, a22, a33, a44, a12, a13, a14, a23, a24, a34] = self.coeffs;
        let (x, y, z) = (p.x, p.y, p.z);
        a11 * x * x
            + a22 * y * y
            + a33 * z * z
            + a44
            + 2.0 * (a12 * x * y + a13 * x * z + a14 * x + a23 * y * z + a24 * y + a34 * z)
    }

    /// Spatial gradient of the quadric form, 2(A₃p + b).
    pub fn gradient(&self, p: &Vec3) -> Vec3 {
        2.0 * (self.block() * p + self.linear())
    }

    /// Point-to-surface distance: exact for planes and spheres, first-order
    /// (Sampson) otherwise.
    pub fn distance(&self, p: &Vec3) -> Result<f64, GeometryError> {
        if matches!(self.type_tag, PrimitiveType::Plane | PrimitiveType::Sphere) {
            if let Some(shape) = self.shape() {
                return Ok(shape.distance(p));
            }
        }
        self.sampson_distance(p)
    }

    pub fn sampson_distance(&self, p: &Vec3) -> Result<f64, GeometryError> {
        let f = self.evaluate(p);
        let g = self.gradient(p).norm();
        if g < GRAD_EPS {
            return Err(GeometryError::DegenerateGradient { fallback: f.abs().sqrt() });
        }
        Ok(f.abs() / g)
    }

    /// Distance with the degenerate-gradient fallback folded in.
    pub fn distance_or_fallback(&self, p: &Vec3) -> f64 {
        match self.distance(p) {
            Ok(d) => d,
            Err(GeometryError::DegenerateGradient { fallback }) => fallback,
            Err(_) => f64::INFINITY,
        }
    }

    /// Unit surface normal (normalized gradient), if defined.
    pub fn normal(&self, p: &Vec3) -> Option<Vec3> {
        let g = self.gradient(p);
        let n = g.norm();
        (n >= GRAD_EPS).then(|| g / n)
    }

    /// Recovers the primitive family from the eigenvalue signature of the quadratic block.
    pub fn classify(&self) -> PrimitiveType {
        let spec = self.spectrum();
        let lmax = spec.max_abs();
        let b = self.linear();
        if lmax < COEFF_ZERO {
            return if b.norm() > COEFF_ZERO { PrimitiveType::Plane } else { PrimitiveType::Null };
        }
        let zero = spec.values.map(|v| v.abs() < EIG_ZERO_REL * lmax);
        let equal = |x: f64, y: f64| x * y > 0.0 && (x - y).abs() <= EIG_EQUAL_REL * x.abs().max(y.abs());
        let c = self.constant();
        match zero.iter().filter(|z| **z).count() {
            3 => PrimitiveType::Plane,
            1 => {
                let iz = (0..3).find(|&i| zero[i]).unwrap_or(0);
                let (l1, l2) = (spec.values[(iz + 1) % 3], spec.values[(iz + 2) % 3]);
                if !equal(l1, l2) {
                    return PrimitiveType::Null;
                }
                let axis = spec.vectors[iz];
                if b.dot(&axis).abs() > EIG_ZERO_REL * lmax {
                    return PrimitiveType::Null;
                }
                // Center on the axis line and check for a real, positive radius.
                let center = pseudo_center(&spec, &b, Some(iz));
                let offset = c + b.dot(&center);
                if offset * l1 < 0.0 && offset.abs() > EIG_ZERO_REL * lmax {
                    PrimitiveType::Cylinder
                } else {
                    PrimitiveType::Null
                }
            }
            0 => {
                let center = pseudo_center(&spec, &b, None);
                let offset = c + b.dot(&center);
                let v = spec.values;
                let positive = v.iter().filter(|x| **x > 0.0).count();
                if positive == 0 || positive == 3 {
                    let all_equal = equal(v[0], v[1]) && equal(v[1], v[2]);
                    if all_equal && offset * v[0] < 0.0 && offset.abs() > EIG_ZERO_REL * lmax {
                        PrimitiveType::Sphere
                    } else {
                        PrimitiveType::Null
                    }
                } else {
                    let odd = spec.odd_one();
                    let (l1, l2) = (v[(odd + 1) % 3], v[(odd + 2) % 3]);
                    if equal(l1, l2) && offset.abs() <= EIG_ZERO_REL * lmax {
                        PrimitiveType::Cone
                    } else {
                        PrimitiveType::Null
                    }
                }
            }
            _ => PrimitiveType::Null,
        }
    }

    /// Plane normal or symmetry axis, sign-canonicalized.
    pub fn axis(&self) -> Result<Vec3, GeometryError> {
        match self.type_tag {
            PrimitiveType::Plane => {
                let n = self.linear();
                if n.norm() < COEFF_ZERO {
                    return Err(GeometryError::NotParametric(PrimitiveType::Plane));
                }
                Ok(canonical_direction(n))
            }
            PrimitiveType::Cylinder => {
                let spec = self.spectrum();
                Ok(canonical_direction(spec.vectors[spec.smallest_abs()]))
            }
            PrimitiveType::Cone => {
                let spec = self.spectrum();
                Ok(canonical_direction(spec.vectors[spec.odd_one()]))
            }
            t => Err(GeometryError::NoAxis(t)),
        }
    }

    /// Parametric interpretation under the type tag. Non-exact coefficients are
    /// snapped to the nearest member of the tagged family.
    pub fn shape(&self) -> Option<Shape> {
        Shape::from_quadric(self)
    }
}

/// Solves A₃ p = -b restricted to the eigen-directions that are not excluded.
pub(crate) fn pseudo_center(spec: &Spectrum, b: &Vec3, exclude: Option<usize>) -> Vec3 {
    let mut p = Vec3::zeros();
    for i in 0..3 {
        if Some(i) == exclude || spec.values[i].abs() < COEFF_ZERO {
            continue;
        }
        let v = spec.vectors[i];
        p -= v * (v.dot(b) / spec.values[i]);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_sphere() -> Quadric {
        Quadric::from_coeffs([1.0, 1.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap()
    }

    #[test]
    fn unit_sphere_normalizes_to_unit_frobenius() {
        let q = unit_sphere();
        let c = q.coeffs();
        assert!((frobenius_norm(c) - 1.0).abs() < 1e-15);
        assert!((c[0] - 0.5).abs() < 1e-15 && (c[3] + 0.5).abs() < 1e-15);
        assert_eq!(q.type_tag(), PrimitiveType::Sphere);
    }

    #[test]
    fn plane_z_has_only_linear_z_term() {
        let q = Quadric::with_type([0.3, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.5], PrimitiveType::Plane).unwrap();
        let c = q.coeffs();
        for (i, v) in c.iter().enumerate() {
            if i == 9 {
                assert!(*v > 0.0);
            } else {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn scaled_coefficients_give_identical_quadric() {
        let c = [0.3, -1.2, 0.7, 0.1, 0.05, -0.4, 0.9, 0.2, -0.3, 0.6];
        let q1 = Quadric::from_coeffs(c).unwrap();
        let q2 = Quadric::from_coeffs(c.map(|v| 3.0 * v)).unwrap();
        let q3 = Quadric::from_coeffs(c.map(|v| -0.25 * v)).unwrap();
        for i in 0..10 {
            assert!((q1.coeffs()[i] - q2.coeffs()[i]).abs() < 1e-15);
            assert!((q1.coeffs()[i] - q3.coeffs()[i]).abs() < 1e-15);
        }
    }

    #[test]
    fn all_zero_is_rejected() {
        assert_eq!(Quadric::from_coeffs([1e-13; 10]), Err(GeometryError::AllZero));
    }

    #[test]
    fn evaluate_examples() {
        let q = unit_sphere();
        assert!(q.evaluate(&Vec3::new(1.0, 0.0, 0.0)).abs() < 1e-15);
        // 3 before normalization, the normalization constant is 1/2.
        assert!((q.evaluate(&Vec3::new(2.0, 0.0, 0.0)) - 1.5).abs() < 1e-15);
        let plane = Quadric::with_type([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], PrimitiveType::Plane).unwrap();
        assert_eq!(plane.evaluate(&Vec3::new(5.0, 5.0, 0.0)), 0.0);
    }

    #[test]
    fn distance_examples() {
        let q = unit_sphere();
        assert!((q.distance(&Vec3::new(2.0, 0.0, 0.0)).unwrap() - 1.0).abs() < 1e-15);
        let plane = Quadric::with_type([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], PrimitiveType::Plane).unwrap();
        assert!((plane.distance(&Vec3::new(1.0, 2.0, 3.0)).unwrap() - 3.0).abs() < 1e-15);
    }

    #[test]
    fn cylinder_distance_is_sampson() {
        let cyl = Quadric::from_coeffs([1.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(cyl.type_tag(), PrimitiveType::Cylinder);
        let p = Vec3::new(2.0, 0.0, 5.0);
        let sampson = cyl.distance(&p).unwrap();
        assert!((sampson - 0.75).abs() < 1e-14);
        // closed-form distance to the radius-1 cylinder about z
        let exact = (p.x * p.x + p.y * p.y).sqrt() - 1.0;
        assert!((exact - 1.0).abs() < 1e-15);
        assert!((cyl.shape().unwrap().distance(&p) - exact).abs() < 1e-12);
    }

    #[test]
    fn degenerate_gradient_at_cone_apex() {
        let cone = Quadric::from_coeffs([1.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        match cone.distance(&Vec3::zeros()) {
            Err(GeometryError::DegenerateGradient { fallback }) => assert_eq!(fallback, 0.0),
            other => panic!("expected degenerate gradient, got {other:?}"),
        }
    }

    #[test]
    fn classify_examples() {
        assert_eq!(unit_sphere().classify(), PrimitiveType::Sphere);
        let cyl = Quadric::from_coeffs([1.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(cyl.classify(), PrimitiveType::Cylinder);
        let cone = Quadric::from_coeffs([1.0, 1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(cone.classify(), PrimitiveType::Cone);
        let hyperboloid = Quadric::from_coeffs([1.0, 1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(hyperboloid.classify(), PrimitiveType::Null);
        let ellipsoid = Quadric::from_coeffs([1.0, 2.0, 3.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(ellipsoid.classify(), PrimitiveType::Null);
    }

    #[test]
    fn axis_examples() {
        let z = Vec3::new(0.0, 0.0, 1.0);
        let plane = Quadric::with_type([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0], PrimitiveType::Plane).unwrap();
        assert!((plane.axis().unwrap() - z).norm() < 1e-15);
        let cyl = Quadric::from_coeffs([1.0, 1.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((cyl.axis().unwrap() - z).norm() < 1e-12);
        // -z = 3  ->  -2*(1/2) z - 3 = 0
        let flipped = Quadric::with_type([0.0, 0.0, 0.0, -3.0, 0.0, 0.0, 0.0, 0.0, 0.0, -0.5], PrimitiveType::Plane).unwrap();
        assert!((flipped.axis().unwrap() - z).norm() < 1e-15);
        assert!(matches!(unit_sphere().axis(), Err(GeometryError::NoAxis(PrimitiveType::Sphere))));
    }

    #[test]
    fn class_indices_round_trip() {
        for t in PrimitiveType::ALL {
            assert_eq!(PrimitiveType::from_class_index(t.class_index(5).unwrap(), 5), t);
        }
        assert_eq!(PrimitiveType::Plane.class_index(2), Some(0));
        assert_eq!(PrimitiveType::Null.class_index(2), Some(1));
        assert_eq!(PrimitiveType::Cone.class_index(2), None);
        assert_eq!(PrimitiveType::from_class_index(1, 2), PrimitiveType::Null);
    }
}
