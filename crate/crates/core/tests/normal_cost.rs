//! Structural cost check for the dual-based contact normal. Lives in its
//! own test binary: the factorization counter is process-global.

use approx::assert_relative_eq;
use contactsim::collision::{detect, normal_ift, normal_value_sensitivity, CollisionProblem};
use contactsim::geometry::{ConvexShape, Pose, ShapePrimitive};
use contactsim::linalg::factorization_count;
use contactsim::solver::SolverOptions;

fn ground() -> ConvexShape {
    ShapePrimitive::ground2d().into()
}

fn opts() -> SolverOptions {
    SolverOptions::collision()
}

#[test]
fn value_sensitivity_needs_no_factorization() {
    let circle: ConvexShape = ShapePrimitive::circle(0.5).into();
    let gnd = ground();
    let pa = Pose::planar(0.0, 1.0, 0.0);
    let pb = Pose::identity(2);
    let problem = CollisionProblem::new(&circle, &pa, &gnd, &pb).unwrap();
    let result = detect(&circle, &pa, &gnd, &pb, &opts()).unwrap();
    let before = factorization_count();
    let (n1, n2) = normal_value_sensitivity(&problem, &result).unwrap();
    assert_eq!(factorization_count(), before, "value sensitivity must not factorize");
    // The IFT route factorizes at least once and agrees to 1e-8.
    let n_ift = normal_ift(&problem, &result).unwrap();
    assert!(factorization_count() > before);
    assert_relative_eq!(n_ift, -&n1, epsilon = 1e-8);
    assert_relative_eq!(n_ift, n2, epsilon = 1e-8);
}
