use contactsim::collision::detect;
use contactsim::geometry::{ConvexShape, Pose, ShapePrimitive};
use contactsim::solver::SolverOptions;
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
fn main() {
    let mut rng = ChaCha8Rng::seed_from_u64(97);
    let opts = SolverOptions::collision();
    for case in 0..40 {
        let r_cyl = rng.gen_range(0.2..0.6);
        let l = rng.gen_range(0.4..1.2);
        let _axis: Vector3<f64> = Vector3::new(0.0, 0.0, 1.0);
        let cyl: ConvexShape = ShapePrimitive::Cylinder { radius: r_cyl, length: l, axis: DVector::from_vec(vec![0.0, 0.0, 1.0]) }.into();
        let r_s = rng.gen_range(0.2..0.8);
        let sphere: ConvexShape = ShapePrimitive::Ellipsoid { e: DMatrix::from_diagonal_element(3, 3, 1.0 / r_s) }.into();
        let xs: Vector3<f64> = Vector3::new(rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5));
        let pc = Pose::identity(3);
        let ps = Pose::new(DVector::from_vec(vec![xs.x, xs.y, xs.z]), 0.0);
        let res = detect(&cyl, &pc, &sphere, &ps, &opts).unwrap();
        if !res.converged() {
            println!("case {case} FAIL: rc={r_cyl:.3} l={l:.3} rs={r_s:.3} xs=({:.3},{:.3},{:.3}) alpha={:.4} res={:.2e}", xs.x, xs.y, xs.z, res.alpha, res.residual_norm);
        }
    }
    println!("done");
}
