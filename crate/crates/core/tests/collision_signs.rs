//! Sign correctness of the pseudo distance against the bisection-on-alpha
//! oracle, across shape variant combinations, plus 3D coverage via support
//! functions.

mod common;

use common::*;
use contactsim::collision::detect;
use contactsim::geometry::{ConvexShape, Pose, ShapePrimitive};
use contactsim::solver::SolverOptions;
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Gen = fn(&mut ChaCha8Rng) -> (ConvexShape, OracleShape);

fn generators() -> Vec<(&'static str, Gen)> {
    vec![
        ("polygon", random_polygon as Gen),
        ("circle", random_circle as Gen),
        ("capsule", random_capsule as Gen),
        ("padded", random_padded_box as Gen),
    ]
}

/// Run one combination: random pairs, detect, compare the sign of phi with
/// the exact scaled-intersection predicate at alpha = 1; spot-check the
/// alpha value against the bisection oracle.
fn run_combo(gen_a: Gen, gen_b: Gen, pairs: usize, seed: u64, name: &str) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = SolverOptions::collision();
    let mut done = 0usize;
    let mut nonconverged = 0usize;
    let mut attempts = 0usize;
    while done < pairs {
        attempts += 1;
        assert!(attempts < pairs * 20, "too many rejected samples for {name}");
        let (sa, oa) = gen_a(&mut rng);
        let (sb, ob) = gen_b(&mut rng);
        let pa = random_pose(&mut rng, 2.0);
        let pb = random_pose(&mut rng, 2.0);
        let side_a = PairSide { shape: sa, oracle: oa, pose: pa };
        let side_b = PairSide { shape: sb, oracle: ob, pose: pb };
        // Avoid near-concentric deep overlaps: the minimum scaling becomes
        // degenerate (alpha near zero) and is not a regime the simulator
        // produces.
        let oracle_alpha = bisect_alpha(&side_a, &side_b, 60);
        if oracle_alpha < 0.05 {
            continue;
        }
        let result = detect(&side_a.shape, &side_a.pose, &side_b.shape, &side_b.pose, &opts)
            .unwrap();
        if !result.converged() {
            nonconverged += 1;
            continue;
        }
        let overlap_oracle = scaled_intersect(&side_a, &side_b, 1.0);
        if result.phi.abs() > 1e-9 {
            assert_eq!(
                result.phi < 0.0,
                overlap_oracle,
                "{name}: phi {} disagrees with oracle overlap {}",
                result.phi,
                overlap_oracle,
            );
        }
        if done % 10 == 0 {
            assert!(
                (result.alpha - oracle_alpha).abs() <= 1e-6 * (1.0 + oracle_alpha),
                "{name}: alpha {} vs oracle {}",
                result.alpha,
                oracle_alpha,
            );
        }
        done += 1;
    }
    assert!(
        nonconverged * 100 <= pairs * 2,
        "{name}: {nonconverged} nonconverged out of {pairs}",
    );
}

#[test]
fn signs_bounded_pairs() {
    let gens = generators();
    let mut seed = 1000;
    for i in 0..gens.len() {
        for j in i..gens.len() {
            seed += 1;
            run_combo(
                gens[i].1,
                gens[j].1,
                200,
                seed,
                &format!("{}-{}", gens[i].0, gens[j].0),
            );
        }
    }
}

#[test]
fn signs_against_halfspace() {
    let opts = SolverOptions::collision();
    let ground = ground_side();
    for (name, gen) in generators() {
        let mut rng = ChaCha8Rng::seed_from_u64(77 + name.len() as u64);
        let mut done = 0usize;
        while done < 200 {
            let (sa, oa) = gen(&mut rng);
            let mut pa = random_pose(&mut rng, 2.0);
            pa.x[1] = rng.gen_range(-0.5..3.0);
            let side_a = PairSide { shape: sa, oracle: oa, pose: pa };
            let oracle_alpha = bisect_alpha(&side_a, &ground, 60);
            if oracle_alpha < 0.05 {
                continue;
            }
            let result = detect(
                &side_a.shape,
                &side_a.pose,
                &ground.shape,
                &ground.pose,
                &opts,
            )
            .unwrap();
            if !result.converged() {
                panic!("{name} vs halfspace failed to converge");
            }
            if result.phi.abs() > 1e-9 {
                assert_eq!(
                    result.phi < 0.0,
                    scaled_intersect(&side_a, &ground, 1.0),
                    "{name} vs halfspace sign mismatch (phi {})",
                    result.phi,
                );
            }
            if done % 10 == 0 {
                assert!(
                    (result.alpha - oracle_alpha).abs() <= 1e-6 * (1.0 + oracle_alpha),
                    "{name} vs halfspace alpha {} oracle {}",
                    result.alpha,
                    oracle_alpha,
                );
            }
            done += 1;
        }
    }
}

// --- 3D coverage ----------------------------------------------------------

fn support_cylinder(d: Vector3<f64>, x: &Vector3<f64>, v: &Vector3<f64>, r: f64, l: f64, alpha: f64) -> f64 {
    let axial = d.dot(v);
    let perp = (d - axial * v).norm();
    d.dot(x) + alpha * (l / 2.0 * axial.abs() + r * perp)
}

fn support_cone(
    d: Vector3<f64>,
    x: &Vector3<f64>,
    v: &Vector3<f64>,
    half_angle: f64,
    h: f64,
    alpha: f64,
) -> f64 {
    let apex = d.dot(&(x - alpha * 0.75 * h * v));
    let axial = d.dot(v);
    let perp = (d - axial * v).norm();
    let base = d.dot(x) + alpha * (h / 4.0 * axial + half_angle.tan() * h * perp);
    apex.max(base)
}

#[test]
fn signs_3d_cylinder_and_cone_vs_plane() {
    // Ground plane {z <= 0}; shapes at identity orientation with vertical or
    // generic axes. Support functions give the exact touching scale.
    let mut rng = ChaCha8Rng::seed_from_u64(91);
    let opts = SolverOptions::collision();
    let plane: ConvexShape = ShapePrimitive::HalfSpace {
        a: DVector::from_vec(vec![0.0, 0.0, 1.0]),
        b: 0.0,
    }
    .into();
    let plane_pose = Pose::identity(3);
    let down = Vector3::new(0.0, 0.0, -1.0);
    for case in 0..60 {
        let phi_ax: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let axis = Vector3::new(phi_ax.sin(), 0.0, phi_ax.cos());
        let x = Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.3..2.5));
        let (shape, support_at): (ConvexShape, Box<dyn Fn(f64) -> f64>) = if case % 2 == 0 {
            let r = rng.gen_range(0.15..0.6);
            let l = rng.gen_range(0.4..1.5);
            (
                ShapePrimitive::Cylinder {
                    radius: r,
                    length: l,
                    axis: DVector::from_vec(vec![axis.x, axis.y, axis.z]),
                }
                .into(),
                Box::new(move |alpha| support_cylinder(down, &x, &axis, r, l, alpha)),
            )
        } else {
            let ha = rng.gen_range(0.25..1.0);
            let h = rng.gen_range(0.4..1.2);
            (
                ShapePrimitive::Cone {
                    half_angle: ha,
                    height: h,
                    axis: DVector::from_vec(vec![axis.x, axis.y, axis.z]),
                }
                .into(),
                Box::new(move |alpha| support_cone(down, &x, &axis, ha, h, alpha)),
            )
        };
        let pose = Pose::new(DVector::from_vec(vec![x.x, x.y, x.z]), 0.0);
        // Exact touching scale: lowest point of the scaled shape reaches 0
        // when support along -z equals 0.
        let mut lo = 1e-6;
        let mut hi = 1.0;
        while support_at(hi) < 0.0 {
            hi *= 2.0;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if support_at(mid) >= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let alpha_oracle = 0.5 * (lo + hi);
        if alpha_oracle < 0.05 {
            continue;
        }
        let result = detect(&shape, &pose, &plane, &plane_pose, &opts).unwrap();
        assert!(result.converged(), "3D case {case} did not converge");
        assert!(
            (result.alpha - alpha_oracle).abs() <= 1e-6 * (1.0 + alpha_oracle),
            "case {case}: alpha {} vs oracle {}",
            result.alpha,
            alpha_oracle,
        );
    }
}

#[test]
fn signs_3d_cylinder_vs_sphere() {
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    let opts = SolverOptions::collision();
    for _ in 0..40 {
        let r_cyl = rng.gen_range(0.2..0.6);
        let l = rng.gen_range(0.4..1.2);
        let axis = Vector3::new(0.0, 0.0, 1.0);
        let cyl: ConvexShape = ShapePrimitive::Cylinder {
            radius: r_cyl,
            length: l,
            axis: DVector::from_vec(vec![0.0, 0.0, 1.0]),
        }
        .into();
        let r_s = rng.gen_range(0.2..0.8);
        let sphere: ConvexShape = ShapePrimitive::Ellipsoid {
            e: DMatrix::from_diagonal_element(3, 3, 1.0 / r_s),
        }
        .into();
        let xc: Vector3<f64> = Vector3::new(0.0, 0.0, 0.0);
        let xs: Vector3<f64> = Vector3::new(
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
            rng.gen_range(-1.5..1.5),
        );
        // Exact: dist(sphere center, alpha-cylinder) = alpha * r_s.
        let dist_to_cyl = |alpha: f64| -> f64 {
            let radial = (xs - xc - (xs - xc).dot(&axis) * axis).norm();
            let axial = (xs - xc).dot(&axis).abs();
            let dr = (radial - alpha * r_cyl).max(0.0);
            let da = (axial - alpha * l / 2.0).max(0.0);
            (dr * dr + da * da).sqrt()
        };
        let mut lo = 1e-6;
        let mut hi = 1.0;
        while dist_to_cyl(hi) > hi * r_s {
            hi *= 2.0;
        }
        for _ in 0..80 {
            let mid = 0.5 * (lo + hi);
            if dist_to_cyl(mid) <= mid * r_s {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let alpha_oracle = 0.5 * (lo + hi);
        if alpha_oracle < 0.05 {
            continue;
        }
        let pc = Pose::identity(3);
        let ps = Pose::new(DVector::from_vec(vec![xs.x, xs.y, xs.z]), 0.0);
        let result = detect(&cyl, &pc, &sphere, &ps, &opts).unwrap();
        assert!(result.converged());
        assert!(
            (result.alpha - alpha_oracle).abs() <= 1e-6 * (1.0 + alpha_oracle),
            "alpha {} vs oracle {}",
            result.alpha,
            alpha_oracle,
        );
    }
}
