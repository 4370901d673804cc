use nalgebra::{DMatrix, DVector, SymmetricEigen};

use super::shape::orthonormal_basis;
use super::{GeometryError, PrimitiveType, Quadric, Shape, Vec3};

/// Relative eigenvalue gap under which the scatter null space counts as multi-dimensional.
const RANK_TOL: f64 = 1e-12;
const LM_ITERS: usize = 50;
const LM_STEP: f64 = 1e-7;

/// Result of an algebraic least-squares quadric fit.
#[derive(Debug, Clone, Copy)]
pub struct QuadricFit {
    pub quadric: Quadric,
    /// Sum of squared algebraic residuals Σ (xᵀAx)² under ‖A‖_F = 1.
    pub residual: f64,
    /// Set when the minimizer is not unique; `quadric` is then one of them.
    pub rank_deficient: bool,
}

/// Fits a quadric minimizing Σ (xᵢᵀAxᵢ)² subject to ‖A‖_F = 1.
///
/// `Plane` and `Sphere` constraints solve inside their linear subspaces
/// (4 and 5 parameters). `Cylinder` polishes the algebraic solution by
/// geometric least squares. Any other constraint runs the unconstrained fit
/// and re-tags the result; without a constraint the result is tagged by
/// [`Quadric::classify`].
pub fn fit_quadric(points: &[Vec3], constrain: Option<PrimitiveType>) -> Result<QuadricFit, GeometryError> {
    let (dim, required): (usize, usize) = match constrain {
        Some(PrimitiveType::Plane) => (4, 3),
        Some(PrimitiveType::Sphere) => (5, 4),
        _ => (10, 9),
    };
    if points.len() < required {
        return Err(GeometryError::Underdetermined { required, got: points.len() });
    }
    let s2 = std::f64::consts::SQRT_2;
    let s3 = 3f64.sqrt();
    // Rows are monomials scaled so the Euclidean norm of the parameter vector
    // equals the Frobenius norm of A.
    let features = |p: &Vec3| -> [f64; 10] {
        let (x, y, z) = (p.x, p.y, p.z);
        match dim {
            4 => [1.0, s2 * x, s2 * y, s2 * z, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
            5 => [(x * x + y * y + z * z) / s3, 1.0, s2 * x, s2 * y, s2 * z, 0.0, 0.0, 0.0, 0.0, 0.0],
            _ => [x * x, y * y, z * z, 1.0, s2 * x * y, s2 * x * z, s2 * x, s2 * y * z, s2 * y, s2 * z],
        }
    };
    let mut scatter = DMatrix::<f64>::zeros(dim, dim);
    for p in points {
        let f = features(p);
        for i in 0..dim {
            for j in i..dim {
                scatter[(i, j)] += f[i] * f[j];
            }
        }
    }
    for i in 0..dim {
        for j in 0..i {
            scatter[(i, j)] = scatter[(j, i)];
        }
    }
    let eig = SymmetricEigen::new(scatter);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let smallest = order[0];
    let largest = eig.eigenvalues[order[dim - 1]].abs().max(f64::MIN_POSITIVE);
    let rank_deficient = eig.eigenvalues[order[1]].abs() <= RANK_TOL * largest;
    let w = eig.eigenvectors.column(smallest);

    let coeffs = match dim {
        4 => [0.0, 0.0, 0.0, w[0], 0.0, 0.0, w[1] / s2, 0.0, w[2] / s2, w[3] / s2],
        5 => {
            let s = w[0] / s3;
            [s, s, s, w[1], 0.0, 0.0, w[2] / s2, 0.0, w[3] / s2, w[4] / s2]
        }
        _ => [
            w[0],
            w[1],
            w[2],
            w[3],
            w[4] / s2,
            w[5] / s2,
            w[6] / s2,
            w[7] / s2,
            w[8] / s2,
            w[9] / s2,
        ],
    };
    let quadric = match constrain {
        Some(PrimitiveType::Cylinder) => {
            let q = Quadric::with_type(coeffs, PrimitiveType::Cylinder)?;
            refine_cylinder(points, &q).map_or(q, |s| s.to_quadric())
        }
        Some(t) => Quadric::with_type(coeffs, t)?,
        None => Quadric::from_coeffs(coeffs)?,
    };
    let residual = points.iter().map(|p| quadric.evaluate(p).powi(2)).sum();
    Ok(QuadricFit { quadric, residual, rank_deficient })
}

/// Geometric least-squares cylinder polish seeded from each principal
/// direction of an algebraic fit; keeps the best converged candidate.
fn refine_cylinder(points: &[Vec3], seed: &Quadric) -> Option<Shape> {
    let spec = seed.spectrum();
    let centroid = points.iter().sum::<Vec3>() / points.len() as f64;
    let mut best: Option<(Shape, f64)> = None;
    for k in 0..3 {
        let axis = spec.vectors[k];
        let Some((shape, sse)) = levenberg_marquardt(points, axis, centroid) else { continue };
        if best.as_ref().is_none_or(|(_, b)| sse < *b) {
            best = Some((shape, sse));
        }
    }
    best.map(|(s, _)| s)
}

fn cylinder_residuals(points: &[Vec3], axis: &Vec3, point: &Vec3, radius: f64) -> Vec<f64> {
    points
        .iter()
        .map(|x| {
            let d = x - point;
            (d - axis * d.dot(axis)).norm() - radius
        })
        .collect()
}

fn levenberg_marquardt(points: &[Vec3], axis0: Vec3, centroid: Vec3) -> Option<(Shape, f64)> {
    let unpack = |base: &(Vec3, Vec3, Vec3, Vec3), x: &[f64; 5]| {
        let (a0, e1, e2, c0) = base;
        let axis = (a0 + e1 * x[0] + e2 * x[1]).normalize();
        let point = c0 + e1 * x[2] + e2 * x[3];
        (axis, point, x[4])
    };
    let (e1, e2) = orthonormal_basis(&axis0);
    let mut base = (axis0, e1, e2, centroid);
    let r0 = cylinder_residuals(points, &axis0, &centroid, 0.0).iter().map(|d| d.abs()).sum::<f64>() / points.len() as f64;
    let mut x = [0.0, 0.0, 0.0, 0.0, r0];
    let sse = |base: &(Vec3, Vec3, Vec3, Vec3), x: &[f64; 5]| {
        let (a, p, r) = unpack(base, x);
        cylinder_residuals(points, &a, &p, r).iter().map(|v| v * v).sum::<f64>()
    };
    let mut cost = sse(&base, &x);
    let mut lambda = 1e-3;
    for _ in 0..LM_ITERS {
        let (a, p, r) = unpack(&base, &x);
        let res = DVector::from_vec(cylinder_residuals(points, &a, &p, r));
        let mut jac = DMatrix::<f64>::zeros(points.len(), 5);
        for j in 0..5 {
            let mut xp = x;
            xp[j] += LM_STEP;
            let (a, p, r) = unpack(&base, &xp);
            let rp = cylinder_residuals(points, &a, &p, r);
            for i in 0..points.len() {
                jac[(i, j)] = (rp[i] - res[i]) / LM_STEP;
            }
        }
        let jtj = jac.transpose() * &jac;
        let g = jac.transpose() * &res;
        let mut improved = false;
        for _ in 0..20 {
            let mut m = jtj.clone();
            for d in 0..5 {
                m[(d, d)] += lambda * (1.0 + jtj[(d, d)]);
            }
            let Some(step) = m.cholesky().map(|c| c.solve(&(-&g))) else {
                lambda *= 10.0;
                continue;
            };
            let mut xn = x;
            for d in 0..5 {
                xn[d] += step[d];
            }
            let cn = sse(&base, &xn);
            if cn < cost {
                x = xn;
                cost = cn;
                lambda = (lambda / 10.0).max(1e-12);
                improved = true;
                break;
            }
            lambda *= 10.0;
        }
        if !improved {
            break;
        }
        // re-center the parametrization on the current estimate
        let (a, p, r) = unpack(&base, &x);
        let (e1, e2) = orthonormal_basis(&a);
        base = (a, e1, e2, p - a * (p - centroid).dot(&a));
        x = [0.0, 0.0, 0.0, 0.0, r];
    }
    let (axis, point, radius) = unpack(&base, &x);
    (radius > 0.0 && cost.is_finite()).then_some((Shape::Cylinder { point, axis, radius }, cost))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn four_points_on_plane() {
        let pts = [
            Vec3::new(0.0, 0.0, 0.0),
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, 1.0, 0.0),
            Vec3::new(0.3, 0.7, 0.0),
        ];
        let fit = fit_quadric(&pts, Some(PrimitiveType::Plane)).unwrap();
        assert!(fit.residual < 1e-18);
        assert!(!fit.rank_deficient);
        assert!((fit.quadric.axis().unwrap() - Vec3::z()).norm() < 1e-12);
    }

    #[test]
    fn exact_sphere_samples() {
        let mut pts = Vec::new();
        for i in 0..32 {
            let t = (i as f64 + 0.5) / 32.0;
            let phi = std::f64::consts::PI * (3.0 - 5f64.sqrt()) * i as f64;
            let z = 1.0 - 2.0 * t;
            let r = (1.0 - z * z).sqrt();
            pts.push(Vec3::new(r * phi.cos(), r * phi.sin(), z));
        }
        let fit = fit_quadric(&pts, None).unwrap();
        assert_eq!(fit.quadric.classify(), PrimitiveType::Sphere);
        let worst = pts.iter().map(|p| fit.quadric.distance(p).unwrap()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "max distance {worst}");
    }

    #[test]
    fn underdetermined_inputs() {
        let pts = vec![Vec3::zeros(); 8];
        assert_eq!(
            fit_quadric(&pts, None).unwrap_err(),
            GeometryError::Underdetermined { required: 9, got: 8 }
        );
        assert!(fit_quadric(&pts[..2], Some(PrimitiveType::Plane)).is_err());
    }

    #[test]
    fn coplanar_points_are_rank_deficient_for_general_fit() {
        let pts: Vec<Vec3> = (0..12).map(|i| Vec3::new((i % 4) as f64, (i / 4) as f64 * 0.7, 0.0)).collect();
        assert!(fit_quadric(&pts, None).unwrap().rank_deficient);
    }

    #[test]
    fn noisy_cylinder_axis_error_is_small() {
        // 9 points spread over a unit cylinder about a random axis, 1% jitter.
        let mut errors = Vec::new();
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let axis = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.2..1.0)).normalize();
            let shape = Shape::Cylinder { point: Vec3::zeros(), axis, radius: 1.0 };
            let (e1, e2) = crate::geometry::shape::orthonormal_basis(&axis);
            let pts: Vec<Vec3> = (0..9)
                .map(|_| {
                    let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    let t: f64 = rng.random_range(-1.0..1.0);
                    let p = axis * t + e1 * phi.cos() + e2 * phi.sin();
                    let n: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                    p + Vec3::new(n[0], n[1], n[2]) * 0.01
                })
                .collect();
            let fit = fit_quadric(&pts, Some(PrimitiveType::Cylinder)).unwrap();
            let est = fit.quadric.axis().unwrap();
            let truth = crate::geometry::quadric::canonical_direction(axis);
            assert!(shape.distance(&pts[0]) < 0.1);
            errors.push(est.dot(&truth).abs().min(1.0).acos().to_degrees());
        }
        let mean = errors.iter().sum::<f64>() / errors.len() as f64;
        assert!(mean < 5.0, "mean axis error {mean} deg");
    }
}
