//! Quadric primitive algebra.
//!
//! A [`Quadric`] stores the ten unique entries of a symmetric 4x4 matrix under
//! canonical normalization (unit Frobenius norm, positive leading
//! coefficient). [`Shape`] gives the explicit parametric form used for exact
//! distances, foot points and surface sampling.

mod fit;
mod project;
pub mod quadric;
mod ransac;
pub(crate) mod sample;
pub mod shape;

use thiserror::Error;

pub use fit::{fit_quadric, QuadricFit};
pub use project::{project, PROJECTION_TOL};
pub use quadric::{canonicalize, frobenius_norm, sign_invariant_l1, PrimitiveType, Quadric, Vec3, FROBENIUS_WEIGHTS, QUADRATIC_BLOCK};
pub use ransac::{ransac_extract, RansacConfig};
pub use sample::{sample_surface, Aabb, BoundedPrimitive, EXTENT_TOL};
pub use shape::Shape;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeometryError {
    #[error("all quadric coefficients are zero")]
    AllZero,
    #[error("quadric gradient vanishes at the query point (algebraic fallback distance {fallback})")]
    DegenerateGradient { fallback: f64 },
    #[error("{0:?} primitives have no axis")]
    NoAxis(PrimitiveType),
    #[error("need at least {required} points, got {got}")]
    Underdetermined { required: usize, got: usize },
    #[error("no surface patch intersects the extent")]
    EmptyIntersection,
    #[error("quadric has no real {0:?} interpretation")]
    NotParametric(PrimitiveType),
    #[error("projection did not converge (residual {residual:e})")]
    NoConvergence { best: Vec3, residual: f64 },
}
