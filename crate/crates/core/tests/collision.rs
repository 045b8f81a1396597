//! Collision detection: closed-form scalings, the box-on-ground KKT system
//! (residual, rank deficiency), dual-based and IFT normals, hyperplane
//! separation, symmetry.

mod common;

use approx::assert_relative_eq;
use common::*;
use contactsim::collision::{
    detect, normal_ift, normal_value_sensitivity, CollisionProblem,
};
use contactsim::geometry::{ConvexShape, Pose, ShapePrimitive};
use contactsim::linalg::{factorization_count, smallest_singular_value};
use contactsim::solver::{SolveStatus, SolverOptions};
use contactsim::Error;
use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn unit_box() -> ConvexShape {
    ShapePrimitive::box2d(1.0, 1.0).into()
}

fn ground() -> ConvexShape {
    ShapePrimitive::ground2d().into()
}

fn opts() -> SolverOptions {
    SolverOptions::collision()
}

#[test]
fn circle_above_plane_scaling_is_height_over_radius() {
    for (r, h) in [(0.5, 1.2), (1.0, 0.4), (0.25, 0.25)] {
        let circle: ConvexShape = ShapePrimitive::circle(r).into();
        let result = detect(
            &circle,
            &Pose::planar(0.3, h, 0.0),
            &ground(),
            &Pose::identity(2),
            &opts(),
        )
        .unwrap();
        assert!(result.converged());
        assert_relative_eq!(result.alpha, h / r, epsilon = 1e-8);
        assert_relative_eq!(result.phi, h / r - 1.0, epsilon = 1e-8);
    }
}

#[test]
fn two_unit_circles_three_apart() {
    let circle: ConvexShape = ShapePrimitive::circle(1.0).into();
    let result = detect(
        &circle,
        &Pose::planar(0.0, 0.0, 0.0),
        &circle,
        &Pose::planar(3.0, 0.0, 0.0),
        &opts(),
    )
    .unwrap();
    assert!(result.converged());
    assert_relative_eq!(result.alpha, 1.5, epsilon = 1e-8);
    assert_relative_eq!(result.p[0], 1.5, epsilon = 1e-6);
    assert_relative_eq!(result.p[1], 0.0, epsilon = 1e-6);
}

#[test]
fn overlapping_boxes_match_bisection_oracle() {
    // Unit boxes offset by [0.5, 0]: the scaled boxes first meet at
    // alpha = 0.25 (analytic), which the sampling-free oracle reproduces.
    let a = PairSide {
        shape: unit_box(),
        oracle: OracleShape::Polygon {
            verts: vec![
                Vector2::new(1.0, 1.0),
                Vector2::new(-1.0, 1.0),
                Vector2::new(-1.0, -1.0),
                Vector2::new(1.0, -1.0),
            ],
        },
        pose: Pose::identity(2),
    };
    let mut b = a.clone();
    b.pose = Pose::planar(0.5, 0.0, 0.0);
    let oracle_alpha = bisect_alpha(&a, &b, 60);
    assert_relative_eq!(oracle_alpha, 0.25, epsilon = 1e-9);
    let result = detect(&a.shape, &a.pose, &b.shape, &b.pose, &opts()).unwrap();
    assert!(result.converged());
    assert!(result.alpha < 1.0);
    assert_relative_eq!(result.alpha, oracle_alpha, epsilon = 1e-4);
}

/// The box-on-ground stationary point: box at `[0, 1]`, ground through the
/// origin; duals pick out the bottom face.
fn footnote_vars() -> DVector<f64> {
    DVector::from_vec(vec![
        0.0, 0.0, // p
        1.0, // alpha
        1.0, 0.0, 0.0, 0.0, // lambda box
        1.0, // lambda ground
        0.0, // lambda alpha
        0.0, 1.0, 2.0, 1.0, // s box
        0.0, // s ground
        1.0, // s alpha
    ])
}

fn footnote_problem<'a>(
    box_shape: &'a ConvexShape,
    box_pose: &'a Pose,
    ground_shape: &'a ConvexShape,
    ground_pose: &'a Pose,
) -> CollisionProblem<'a> {
    CollisionProblem::new(box_shape, box_pose, ground_shape, ground_pose).unwrap()
}

#[test]
fn box_on_ground_solution_zeroes_kkt_residual() {
    let box_shape = unit_box();
    let box_pose = Pose::planar(0.0, 1.0, 0.0);
    let ground_shape = ground();
    let ground_pose = Pose::identity(2);
    let problem = footnote_problem(&box_shape, &box_pose, &ground_shape, &ground_pose);
    let r = problem.kkt_residual(&footnote_vars(), 0.0).unwrap();
    assert_eq!(r.amax(), 0.0, "residual should vanish exactly: {r}");
}

#[test]
fn box_on_ground_kkt_jacobian_is_rank_deficient() {
    let box_shape = unit_box();
    let box_pose = Pose::planar(0.0, 1.0, 0.0);
    let ground_shape = ground();
    let ground_pose = Pose::identity(2);
    let problem = footnote_problem(&box_shape, &box_pose, &ground_shape, &ground_pose);
    let jac = problem.kkt_jacobian(&footnote_vars()).unwrap();
    assert!(smallest_singular_value(&jac) < 1e-12);
    // Columns 1, 11, 13 (1-based) are linearly dependent:
    // col(p_x) = col(s_p2) - col(s_p4).
    let combo = jac.column(0) - jac.column(10) + jac.column(12);
    assert_eq!(combo.amax(), 0.0);
}

#[test]
fn kkt_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let cases: Vec<(ConvexShape, ConvexShape)> = vec![
        (unit_box(), ground()),
        (
            ShapePrimitive::regular_polygon(5, 0.8).into(),
            ShapePrimitive::circle(0.6).into(),
        ),
        (
            ShapePrimitive::Capsule {
                radius: 0.3,
                length: 1.0,
                axis: dvec(&[1.0, 0.0]),
            }
            .into(),
            ShapePrimitive::PaddedPolytope {
                a: DMatrix::from_row_slice(4, 2, &[0.0, -1.0, 1.0, 0.0, 0.0, 1.0, -1.0, 0.0]),
                b: dvec(&[0.5, 0.5, 0.5, 0.5]),
                radius: 0.2,
            }
            .into(),
        ),
    ];
    for (sa, sb) in &cases {
        let pa = Pose::planar(0.1, 0.9, 0.3);
        let pb = Pose::planar(-0.2, -0.1, -0.5);
        let problem = CollisionProblem::new(sa, &pa, sb, &pb).unwrap();
        let n = problem.layout.dim();
        for _ in 0..4 {
            // Random strictly-interior point.
            let mut v = DVector::zeros(n);
            for i in 0..n {
                v[i] = rng.gen_range(0.2..1.4);
            }
            let jac = problem.kkt_jacobian(&v).unwrap();
            let h = 1e-6;
            let mut fd = DMatrix::zeros(n, n);
            for j in 0..n {
                let mut vp = v.clone();
                vp[j] += h;
                let mut vm = v.clone();
                vm[j] -= h;
                let rp = problem.kkt_residual(&vp, 0.0).unwrap();
                let rm = problem.kkt_residual(&vm, 0.0).unwrap();
                fd.set_column(j, &((rp - rm) / (2.0 * h)));
            }
            let err = (&jac - &fd).amax() / (1.0 + fd.amax());
            assert!(err < 1e-6, "jacobian FD mismatch: {err:.3e}");
        }
    }
}

#[test]
fn box_on_ground_normals() {
    let box_shape = unit_box();
    let result = detect(
        &box_shape,
        &Pose::planar(0.0, 1.0, 0.0),
        &ground(),
        &Pose::identity(2),
        &opts(),
    )
    .unwrap();
    assert!(result.converged());
    let n_b = result.normal_b.clone().unwrap();
    assert_relative_eq!(n_b, dvec(&[0.0, 1.0]), epsilon = 1e-9);
    let n_a = result.normal_a.clone().unwrap();
    assert_relative_eq!(n_a, dvec(&[0.0, -1.0]), epsilon = 1e-9);
}

#[test]
fn circle_pair_normals_antiparallel_along_axis() {
    let circle: ConvexShape = ShapePrimitive::circle(1.0).into();
    let pa = Pose::planar(0.0, 0.0, 0.0);
    let pb = Pose::planar(3.0, 0.0, 0.0);
    let problem = CollisionProblem::new(&circle, &pa, &circle, &pb).unwrap();
    let result = detect(&circle, &pa, &circle, &pb, &opts()).unwrap();
    let (n1, n2) = normal_value_sensitivity(&problem, &result).unwrap();
    assert_relative_eq!(n1, dvec(&[1.0, 0.0]), epsilon = 1e-7);
    assert_relative_eq!(n2, dvec(&[-1.0, 0.0]), epsilon = 1e-7);
    assert_relative_eq!((&n1 + &n2).norm(), 0.0, epsilon = 1e-10);
}


#[test]
fn ift_fails_in_face_to_face_contact() {
    // Box resting flat on the ground: the collision Jacobian is rank
    // deficient and the IFT route must refuse.
    let box_shape = unit_box();
    let gnd = ground();
    let pa = Pose::planar(0.0, 1.0, 0.0);
    let pb = Pose::identity(2);
    let problem = CollisionProblem::new(&box_shape, &pa, &gnd, &pb).unwrap();
    let result = detect(&box_shape, &pa, &gnd, &pb, &opts()).unwrap();
    assert!(result.converged());
    let err = normal_ift(&problem, &result).unwrap_err();
    assert!(matches!(err, Error::RankDeficient(_)), "got {err:?}");
}

#[test]
fn ift_succeeds_in_vertex_face_contact() {
    // Tilted box above the ground: unique vertex contact, invertible system.
    let box_shape = unit_box();
    let gnd = ground();
    let pa = Pose::planar(0.2, 1.8, 0.4);
    let pb = Pose::identity(2);
    let problem = CollisionProblem::new(&box_shape, &pa, &gnd, &pb).unwrap();
    let result = detect(&box_shape, &pa, &gnd, &pb, &opts()).unwrap();
    assert!(result.converged());
    let n_ift = normal_ift(&problem, &result).unwrap();
    let (n1, _n2) = normal_value_sensitivity(&problem, &result).unwrap();
    assert_relative_eq!(n_ift, -&n1, epsilon = 1e-6);
}

#[test]
fn random_pairs_value_sensitivity_matches_ift() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    let mut tested = 0;
    while tested < 20 {
        let (sa, _oa) = random_polygon(&mut rng);
        let (sb, _ob) = random_circle(&mut rng);
        let pa = random_pose(&mut rng, 1.5);
        let pb = random_pose(&mut rng, 1.5);
        let problem = CollisionProblem::new(&sa, &pa, &sb, &pb).unwrap();
        let Ok(result) = detect(&sa, &pa, &sb, &pb, &opts()) else { continue };
        if !result.converged() {
            continue;
        }
        let Ok(n_ift) = normal_ift(&problem, &result) else { continue };
        let (n1, _) = normal_value_sensitivity(&problem, &result).unwrap();
        assert_relative_eq!(n_ift, -&n1, epsilon = 1e-6);
        tested += 1;
    }
}

#[test]
fn value_sensitivity_matches_numeric_alpha_gradient() {
    // d alpha / d x_a from the duals equals central differences of detect's
    // alpha over the first pose's translation.
    let cases: Vec<(ConvexShape, Pose, ConvexShape, Pose)> = vec![
        (
            ShapePrimitive::circle(0.5).into(),
            Pose::planar(0.3, 0.8, 0.0),
            ground(),
            Pose::identity(2),
        ),
        (
            ShapePrimitive::regular_polygon(5, 0.7).into(),
            Pose::planar(0.2, 0.3, 0.7),
            ShapePrimitive::circle(0.6).into(),
            Pose::planar(1.6, -0.4, 0.0),
        ),
    ];
    for (sa, pa, sb, pb) in &cases {
        let problem = CollisionProblem::new(sa, pa, sb, pb).unwrap();
        let result = detect(sa, pa, sb, pb, &opts()).unwrap();
        assert!(result.converged());
        // Dual route: d alpha / d x_a = -(dg_a/dp)^T lambda_a.
        let (n1, _) = normal_value_sensitivity(&problem, &result).unwrap();
        let lam_a = result.lambda_a(&problem.layout);
        let grad_mag = {
            let eval = contactsim::geometry::eval_at_pose(
                sa,
                pa,
                &result.p,
                result.alpha,
                &result.eps_a,
            )
            .unwrap();
            eval.dual_gradient(&lam_a).norm()
        };
        let dual_grad = -n1 * grad_mag;
        let h = 1e-5;
        for j in 0..2 {
            let mut pp = pa.clone();
            pp.x[j] += h;
            let mut pm = pa.clone();
            pm.x[j] -= h;
            let ap = detect(sa, &pp, sb, pb, &opts()).unwrap().alpha;
            let am = detect(sa, &pm, sb, pb, &opts()).unwrap().alpha;
            let fd = (ap - am) / (2.0 * h);
            assert!(
                (dual_grad[j] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                "dalpha/dx mismatch: dual {} vs fd {}",
                dual_grad[j],
                fd,
            );
        }
    }
}

#[test]
fn separating_hyperplane_property() {
    // For converged separated/touching pairs, the plane through p with
    // normal n2 has shape B behind it and shape A in front of it.
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let mut tested = 0;
    while tested < 40 {
        let (sa, oa) = match tested % 3 {
            0 => random_polygon(&mut rng),
            1 => random_circle(&mut rng),
            _ => random_capsule(&mut rng),
        };
        let (sb, ob) = match tested % 2 {
            0 => random_box(&mut rng),
            _ => random_circle(&mut rng),
        };
        let pa = random_pose(&mut rng, 2.0);
        let pb = random_pose(&mut rng, 2.0);
        let side_a = PairSide { shape: sa.clone(), oracle: oa, pose: pa.clone() };
        let side_b = PairSide { shape: sb.clone(), oracle: ob, pose: pb.clone() };
        // Only separated or touching pairs.
        if scaled_intersect(&side_a, &side_b, 1.0) {
            continue;
        }
        let problem = CollisionProblem::new(&sa, &pa, &sb, &pb).unwrap();
        let Ok(result) = detect(&sa, &pa, &sb, &pb, &opts()) else { continue };
        if !result.converged() {
            continue;
        }
        let Ok((_n1, n2)) = normal_value_sensitivity(&problem, &result) else { continue };
        let p = Vector2::new(result.p[0], result.p[1]);
        let n = Vector2::new(n2[0], n2[1]);
        for _ in 0..200 {
            if let Some(x) = sample_point(&side_b, 1.0, &mut rng) {
                assert!(n.dot(&(x - p)) <= 1e-6, "shape B point on wrong side");
            }
            if let Some(x) = sample_point(&side_a, 1.0, &mut rng) {
                assert!(n.dot(&(x - p)) >= -1e-6, "shape A point on wrong side");
            }
        }
        tested += 1;
    }
}

#[test]
fn detect_is_symmetric_in_alpha() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for i in 0..20 {
        let (sa, _) = if i % 2 == 0 { random_polygon(&mut rng) } else { random_capsule(&mut rng) };
        let (sb, _) = random_circle(&mut rng);
        let pa = random_pose(&mut rng, 1.5);
        let pb = random_pose(&mut rng, 1.5);
        let r1 = detect(&sa, &pa, &sb, &pb, &opts()).unwrap();
        let r2 = detect(&sb, &pb, &sa, &pa, &opts()).unwrap();
        if r1.converged() && r2.converged() {
            assert!(
                (r1.alpha - r2.alpha).abs() < 1e-8,
                "asymmetric alpha: {} vs {}",
                r1.alpha,
                r2.alpha,
            );
        }
    }
}

#[test]
fn halfspace_pair_is_unbounded_config_error() {
    let g1 = ground();
    let g2 = ground();
    let p1 = Pose::identity(2);
    let p2 = Pose::planar(0.0, 1.0, 0.0);
    match CollisionProblem::new(&g1, &p1, &g2, &p2) {
        Err(Error::Config(_)) => {}
        Err(other) => panic!("expected config error, got {other:?}"),
        Ok(_) => panic!("two half-spaces must be rejected"),
    }
}

#[test]
fn iteration_cap_reports_nonconverged_with_trace() {
    let circle: ConvexShape = ShapePrimitive::circle(0.5).into();
    let opts = SolverOptions { max_iter: 2, ..SolverOptions::collision() };
    let result = detect(
        &circle,
        &Pose::planar(0.0, 4.0, 0.0),
        &ground(),
        &Pose::identity(2),
        &opts,
    )
    .unwrap();
    assert_eq!(result.status, SolveStatus::MaxIter);
    assert!(!result.trace.is_empty());
}

#[test]
fn minkowski_composite_detects_like_padded_box() {
    // Rounded box via Minkowski sum against the ground: touching height
    // equals half-height plus the padding radius.
    let rounded = contactsim::geometry::minkowski_sum(
        ShapePrimitive::box2d(0.5, 0.3).into(),
        ShapePrimitive::circle(0.2).into(),
    )
    .unwrap();
    let result = detect(
        &rounded,
        &Pose::planar(0.0, 1.0, 0.0),
        &ground(),
        &Pose::identity(2),
        &opts(),
    )
    .unwrap();
    assert!(result.converged());
    // Scaled shape touches ground when alpha*(0.3 + 0.2) = 1.0.
    assert_relative_eq!(result.alpha, 2.0, epsilon = 1e-7);
}
