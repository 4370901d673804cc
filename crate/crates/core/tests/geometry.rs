use proptest::prelude::*;
use quadcomp::geometry::{
    fit_quadric, project, sample_surface, Aabb, BoundedPrimitive, PrimitiveType, Quadric, Shape, Vec3, EXTENT_TOL,
};

fn unit() -> impl Strategy<Value = Vec3> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("not too short", |(x, y, z)| (x * x + y * y + z * z).sqrt() > 0.2)
        .prop_map(|(x, y, z)| Vec3::new(x, y, z).normalize())
}

fn point(s: f64) -> impl Strategy<Value = Vec3> {
    (-s..s, -s..s, -s..s).prop_map(|(x, y, z)| Vec3::new(x, y, z))
}

fn shape() -> impl Strategy<Value = Shape> {
    prop_oneof![
        (unit(), -0.3..0.3f64).prop_map(|(normal, offset)| Shape::Plane { normal, offset }),
        (point(0.2), 0.15..0.45f64).prop_map(|(center, radius)| Shape::Sphere { center, radius }),
        (point(0.2), unit(), 0.1..0.35f64).prop_map(|(point, axis, radius)| Shape::Cylinder { point, axis, radius }),
        (point(0.15), unit(), 0.25..0.65f64).prop_map(|(apex, axis, half_angle)| Shape::Cone { apex, axis, half_angle }),
    ]
}

fn unit_box() -> Aabb {
    Aabb { min: [-0.5; 3], max: [0.5; 3] }
}

fn samples(s: &Shape, n: usize, seed: u64) -> Vec<Vec3> {
    let bp = BoundedPrimitive { quadric: s.to_quadric(), support: vec![], extent: unit_box() };
    sample_surface(&bp, n, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn distance_ignores_coefficient_scale(s in shape(), c in prop_oneof![-50.0..-0.02f64, 0.02..50.0f64], p in point(0.6)) {
        let q = s.to_quadric();
        let scaled: [f64; 10] = q.coeffs().map(|v| v * c);
        let r = Quadric::with_type(scaled, q.type_tag()).unwrap();
        prop_assert!(r.coeffs().iter().zip(q.coeffs()).all(|(a, b)| (a - b).abs() < 1e-12));
        prop_assert!((r.distance_or_fallback(&p) - q.distance_or_fallback(&p)).abs() < 1e-12);
    }

    #[test]
    fn classification_recovers_generating_type(s in shape()) {
        prop_assert_eq!(Quadric::from_coeffs(*s.to_quadric().coeffs()).unwrap().type_tag(), s.primitive_type());
    }

    #[test]
    fn noise_free_fit_passes_through_samples(s in shape(), seed in 0u64..1000) {
        let pts = samples(&s, 60, seed);
        let constrain = (s.primitive_type() == PrimitiveType::Plane).then_some(PrimitiveType::Plane);
        let fit = fit_quadric(&pts, constrain).unwrap();
        let worst = pts.iter().map(|p| fit.quadric.distance_or_fallback(p)).fold(0.0, f64::max);
        prop_assert!(worst < 1e-6, "worst {}", worst);
    }

    #[test]
    fn projection_lands_on_surface(s in shape(), p in point(0.6)) {
        let q = s.to_quadric();
        if let Ok(x) = project(&p, &q) {
            prop_assert!(q.evaluate(&x).abs() < 1e-8);
        } else {
            let required = matches!(s, Shape::Plane { .. } | Shape::Cylinder { .. });
            prop_assert!(!required);
        }
    }

    #[test]
    fn axis_ignores_coefficient_sign(s in shape()) {
        let q = s.to_quadric();
        let neg = Quadric::with_type(q.coeffs().map(|v| -v), q.type_tag()).unwrap();
        match (q.axis(), neg.axis()) {
            (Ok(a), Ok(b)) => prop_assert!((a - b).norm() < 1e-12),
            (a, b) => {
                prop_assert!(a.is_err() && b.is_err());
                prop_assert_eq!(q.type_tag(), PrimitiveType::Sphere);
            }
        }
    }

    #[test]
    fn samples_lie_on_surface_inside_extent(s in shape(), seed in 0u64..1000) {
        let q = s.to_quadric();
        let bx = unit_box();
        for p in samples(&s, 64, seed) {
            prop_assert!(q.distance_or_fallback(&p) < 1e-6);
            prop_assert!(bx.contains(&p, EXTENT_TOL));
        }
    }
}
