use contactsim::collision::{detect, CollisionProblem};
use contactsim::geometry::{ConvexShape, Pose, ShapePrimitive};
use contactsim::solver::SolverOptions;
use nalgebra::{DMatrix, DVector};
fn main() {
    let cyl: ConvexShape = ShapePrimitive::Cylinder { radius: 0.277, length: 0.507, axis: DVector::from_vec(vec![0.0, 0.0, 1.0]) }.into();
    let sphere: ConvexShape = ShapePrimitive::Ellipsoid { e: DMatrix::from_diagonal_element(3, 3, 1.0 / 0.633) }.into();
    let pc = Pose::identity(3);
    let ps = Pose::new(DVector::from_vec(vec![-0.218, -0.157, 1.141]), 0.0);
    let problem = CollisionProblem::new(&cyl, &pc, &sphere, &ps).unwrap();
    let res = detect(&cyl, &pc, &sphere, &ps, &SolverOptions::collision()).unwrap();
    let r = problem.kkt_residual(&res.v, 1e-11).unwrap();
    let l = problem.layout;
    println!("status {:?} alpha {}", res.status, res.alpha);
    println!("stat_alpha {:.3e}", r[l.row_stat_alpha()]);
    println!("stat_p     {:.3e} {:.3e} {:.3e}", r[l.row_stat_p()], r[l.row_stat_p()+1], r[l.row_stat_p()+2]);
    for i in 0..l.ka { println!("stat_ea[{i}] {:.3e}", r[l.row_stat_eps_a()+i]); }
    for i in 0..l.ng() { println!("feas[{i}] {:.3e}  comp[{i}] {:.3e}  lam {:.3e} s {:.3e}", r[l.row_feas()+i], r[l.row_comp()+i], res.lambda[i], res.s[i]); }
    println!("eps_a = {:?}", res.eps_a.as_slice());
    println!("p = {:?}", res.p.as_slice());
}
