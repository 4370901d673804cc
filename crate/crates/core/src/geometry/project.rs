use nalgebra::{Matrix4, Vector4};

use super::{GeometryError, PrimitiveType, Quadric, Vec3};

const NEWTON_ITERS: usize = 10;
const POLISH_ITERS: usize = 5;
/// Target residual |xᵀAx| on the normalized quadric.
pub const PROJECTION_TOL: f64 = 1e-8;

/// Foot point of `p` on the quadric surface.
///
/// Planes, spheres, cylinders and cones use their closed-form foot points.
/// Everything else runs Newton iterations on the Lagrangian system
/// `x − p + μ∇f(x) = 0, f(x) = 0` from the Sampson step. In both cases a few
/// Sampson corrections polish the residual on the actual coefficients.
pub fn project(p: &Vec3, q: &Quadric) -> Result<Vec3, GeometryError> {
    let exact = match q.type_tag() {
        PrimitiveType::Null => None,
        _ => q.shape().and_then(|s| s.foot_point(p)),
    };
    let start = match exact {
        Some(x) => x,
        None => newton_foot_point(p, q)?,
    };
    polish(start, q)
}

fn newton_foot_point(p: &Vec3, q: &Quadric) -> Result<Vec3, GeometryError> {
    let f0 = q.evaluate(p);
    let g0 = q.gradient(p);
    let gn2 = g0.norm_squared();
    if gn2.sqrt() < super::quadric::GRAD_EPS {
        return Err(GeometryError::NoConvergence { best: *p, residual: f0.abs() });
    }
    let mu0 = f0 / gn2;
    let mut x = p - g0 * mu0;
    let mut mu = mu0;
    let block = q.block();
    for _ in 0..NEWTON_ITERS {
        let g = q.gradient(&x);
        let f = q.evaluate(&x);
        let r = x - p + g * mu;
        let jac_xx = nalgebra::Matrix3::identity() + block * (2.0 * mu);
        let mut jac = Matrix4::zeros();
        jac.fixed_view_mut::<3, 3>(0, 0).copy_from(&jac_xx);
        for i in 0..3 {
            jac[(i, 3)] = g[i];
            jac[(3, i)] = g[i];
        }
        let rhs = Vector4::new(-r.x, -r.y, -r.z, -f);
        let Some(step) = jac.lu().solve(&rhs) else { break };
        x += Vec3::new(step[0], step[1], step[2]);
        mu += step[3];
        if step.norm() < 1e-15 {
            break;
        }
    }
    Ok(x)
}

fn polish(mut x: Vec3, q: &Quadric) -> Result<Vec3, GeometryError> {
    for _ in 0..POLISH_ITERS {
        let f = q.evaluate(&x);
        if f.abs() <= PROJECTION_TOL * 1e-3 {
            break;
        }
        let g = q.gradient(&x);
        let gn2 = g.norm_squared();
        if gn2 < 1e-24 {
            break;
        }
        x -= g * (f / gn2);
    }
    let residual = q.evaluate(&x).abs();
    if residual.is_finite() && residual <= PROJECTION_TOL {
        Ok(x)
    } else {
        Err(GeometryError::NoConvergence { best: x, residual })
    }
}
