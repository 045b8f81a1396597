//! Smooth gradients of the step map via the implicit function theorem.
//!
//! At a converged step solution `r(v*; data) = 0`, the sensitivity of the
//! solution to any problem datum `w` is `dv*/dw = -(dr/dv)^{-1} dr/dw`. One LU
//! factorization of the step Jacobian serves every right-hand side; the rows
//! belonging to the next configuration are extracted into [`StepGradients`].
//!
//! Simulation and differentiation use different relaxations: the simulation
//! runs stiff (small `rho`) and the gradients are taken at a user-chosen
//! `rho_grad` by re-solving with a warm start from the stiff solution. Larger
//! `rho_grad` trades gradient fidelity for smoothness across contact-mode
//! boundaries.

use crate::dynamics::{build_step_problem, Mechanism, MechanismState, StepProblem};
use crate::geometry::{ConvexShape, ShapePrimitive};
use crate::linalg::LuSolver;
use crate::solver::{self, NcpProblem, SolverOptions};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, Vector2};

/// A scalar problem parameter the step map can be differentiated against.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Param {
    Mass(usize),
    Inertia(usize),
    /// Shared friction coefficient.
    Mu,
    /// One offset entry of a body's polytope member: `b[row] `.
    PolytopeOffset { body: usize, member: usize, row: usize },
    /// Radius of a body's capsule or padded-polytope member.
    Radius { body: usize, member: usize },
}

/// Gradients of the next configuration with respect to step data.
#[derive(Clone, Debug)]
pub struct StepGradients {
    /// d q_plus / d q (current configuration), `nq x nq`.
    pub dq_dq: DMatrix<f64>,
    /// d q_plus / d q_prev, `nq x nq`.
    pub dq_dq_prev: DMatrix<f64>,
    /// d q_plus / d u (control wrench), `nq x nq`.
    pub dq_du: DMatrix<f64>,
    /// Columns for the requested scalar parameters, same order.
    pub dq_dparams: Vec<(Param, DVector<f64>)>,
    /// Relaxation level the gradients were evaluated at.
    pub rho: f64,
    /// LU factorizations spent (always 1).
    pub factorizations: usize,
}

/// Differentiate a converged step solution in place.
///
/// `v` must satisfy the step residual at the problem's relaxation; all
/// gradients are produced from a single factorization of `dr/dv`.
pub fn step_sensitivity(
    problem: &StepProblem<'_>,
    v: &DVector<f64>,
    params: &[Param],
) -> Result<StepGradients> {
    let dim = problem.dim();
    let nq = problem.nq;
    let jac = problem
        .jacobian_at(v)
        .map_err(|e| Error::GradientUnavailable(e.to_string()))?;
    let lu = LuSolver::new(jac).ok_or_else(|| {
        Error::GradientUnavailable("step Jacobian is singular".into())
    })?;

    let solve_block = |rhs: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(nq, rhs.ncols());
        for j in 0..rhs.ncols() {
            let col = lu
                .solve(&(-rhs.column(j).into_owned()))
                .ok_or_else(|| Error::GradientUnavailable("singular back-substitution".into()))?;
            out.column_mut(j).copy_from(&col.rows(0, nq));
        }
        Ok(out)
    };

    let dq_dq = solve_block(&dr_dq(problem, v, dim))?;
    let dq_dq_prev = solve_block(&dr_dq_prev(problem, dim))?;
    let dq_du = solve_block(&dr_du(problem, dim))?;
    let mut dq_dparams = Vec::with_capacity(params.len());
    for &param in params {
        let rhs = dr_dparam(problem, v, dim, param)?;
        let col = solve_block(&DMatrix::from_column_slice(dim, 1, rhs.as_slice()))?;
        dq_dparams.push((param, col.column(0).into_owned()));
    }
    Ok(StepGradients {
        dq_dq,
        dq_dq_prev,
        dq_du,
        dq_dparams,
        rho: problem.rho,
        factorizations: 1,
    })
}

/// Re-solve a step at `rho_grad` (warm started from a stiff solution) and
/// differentiate there.
pub fn step_gradients_at(
    mech: &Mechanism,
    state: &MechanismState,
    stiff_solution: &DVector<f64>,
    rho_grad: f64,
    opts: &SolverOptions,
    params: &[Param],
) -> Result<(StepGradients, DVector<f64>)> {
    let problem = build_step_problem(mech, state, rho_grad)?;
    let opts = SolverOptions { rho_target: rho_grad, ..opts.clone() };
    let init = solver::warm_start(stiff_solution, &problem.cone_pairs(), opts.warm_perturbation);
    let report = solver::solve(&problem, &init, &opts);
    if !report.converged() {
        return Err(Error::NotConverged(format!(
            "re-solve at rho = {rho_grad:.1e} ended with {:?}",
            report.status
        )));
    }
    let grads = step_sensitivity(&problem, &report.v, params)?;
    Ok((grads, report.v))
}

/// `dr/dq`: current configuration enters the integrator rows and the
/// contact-point velocity in the maximum-dissipation rows.
fn dr_dq(problem: &StepProblem<'_>, v: &DVector<f64>, dim: usize) -> DMatrix<f64> {
    let mech = problem.mech;
    let dt = problem.state.dt;
    let mut out = DMatrix::zeros(dim, mech.nq());
    for (i, body) in mech.bodies.iter().enumerate() {
        let o = 3 * i;
        out[(o, o)] = -2.0 * body.mass / dt;
        out[(o + 1, o + 1)] = -2.0 * body.mass / dt;
        out[(o + 2, o + 2)] = -2.0 * body.inertia / dt;
    }
    if mech.friction {
        for (idx, lay) in problem.layouts.iter().enumerate() {
            let p = Vector2::new(v[lay.v_p()], v[lay.v_p() + 1]);
            let n = problem.solution_normal(v, idx);
            let t = crate::dynamics::perp(&n);
            let body_cols = |body: usize, body_sign: f64, out: &mut DMatrix<f64>| {
                let xp = Vector2::new(v[3 * body], v[3 * body + 1]);
                // d v_rel / d x = -I/dt ; d v_rel / d theta = -perp(p - xp)/dt.
                for (k, sign) in [(0usize, 1.0f64), (1, -1.0)] {
                    let row = lay.r_sbeta() + k;
                    out[(row, 3 * body)] += -sign * body_sign * (-t.x / dt);
                    out[(row, 3 * body + 1)] += -sign * body_sign * (-t.y / dt);
                    let dv_dth = -crate::dynamics::perp(&(p - xp)) / dt;
                    out[(row, 3 * body + 2)] += -sign * body_sign * t.dot(&dv_dth);
                }
            };
            body_cols(problem.pairs[idx].body_a, 1.0, &mut out);
            if let crate::dynamics::Partner::Body(j) = problem.pairs[idx].partner {
                body_cols(j, -1.0, &mut out);
            }
        }
    }
    out
}

/// `dr/dq_prev`: only the integrator rows.
fn dr_dq_prev(problem: &StepProblem<'_>, dim: usize) -> DMatrix<f64> {
    let mech = problem.mech;
    let dt = problem.state.dt;
    let mut out = DMatrix::zeros(dim, mech.nq());
    for (i, body) in mech.bodies.iter().enumerate() {
        let o = 3 * i;
        out[(o, o)] = body.mass / dt;
        out[(o + 1, o + 1)] = body.mass / dt;
        out[(o + 2, o + 2)] = body.inertia / dt;
    }
    out
}

/// `dr/du`: control wrenches enter as impulses `-u dt`.
fn dr_du(problem: &StepProblem<'_>, dim: usize) -> DMatrix<f64> {
    let mech = problem.mech;
    let dt = problem.state.dt;
    let mut out = DMatrix::zeros(dim, mech.nq());
    for i in 0..mech.nq() {
        out[(i, i)] = -dt;
    }
    out
}

fn dr_dparam(
    problem: &StepProblem<'_>,
    v: &DVector<f64>,
    dim: usize,
    param: Param,
) -> Result<DVector<f64>> {
    let mech = problem.mech;
    let state = problem.state;
    let dt = state.dt;
    let mut out = DVector::zeros(dim);
    match param {
        Param::Mass(i) => {
            let o = 3 * i;
            for axis in 0..2 {
                out[o + axis] = (v[o + axis] - 2.0 * state.q[o + axis]
                    + state.q_prev[o + axis])
                    / dt
                    - mech.gravity[axis] * dt;
            }
        }
        Param::Inertia(i) => {
            let o = 3 * i;
            out[o + 2] = (v[o + 2] - 2.0 * state.q[o + 2] + state.q_prev[o + 2]) / dt;
        }
        Param::Mu => {
            if !mech.friction {
                return Err(Error::config("mu sensitivity requires friction"));
            }
            for lay in &problem.layouts {
                out[lay.r_spsi()] = -v[lay.v_gamma()];
            }
        }
        Param::PolytopeOffset { body, member, row } => {
            let mut touched = false;
            for (idx, lay) in problem.layouts.iter().enumerate() {
                for (is_a, shape) in member_occurrences(problem, idx, body, member) {
                    let rows = match shape {
                        ConvexShape::Primitive(
                            ShapePrimitive::Polytope { b, .. }
                            | ShapePrimitive::PaddedPolytope { b, .. },
                        ) => b.len(),
                        _ => return Err(Error::config("member is not a polytope")),
                    };
                    if row >= rows {
                        return Err(Error::config("polytope offset row out of range"));
                    }
                    touched = true;
                    let alpha = v[lay.v_alpha()];
                    let block = if is_a { 0 } else { lay.ma };
                    // Feasibility row: g_row = ... - alpha*b[row].
                    out[lay.r_feas() + block + row] += -alpha;
                    // Stationarity over alpha: contributes -lambda_row.
                    out[lay.r_stat_alpha()] += -v[lay.v_lambda() + block + row];
                }
            }
            if !touched {
                return Err(Error::config("parameterized member not found in any pair"));
            }
        }
        Param::Radius { body, member } => {
            let mut touched = false;
            for (idx, lay) in problem.layouts.iter().enumerate() {
                for (is_a, shape) in member_occurrences(problem, idx, body, member) {
                    let alpha = v[lay.v_alpha()];
                    let block = if is_a { 0 } else { lay.ma };
                    match shape {
                        ConvexShape::Primitive(ShapePrimitive::Capsule { .. }) => {
                            // g0 = |w - eps v| - alpha R.
                            out[lay.r_feas() + block] += -alpha;
                            out[lay.r_stat_alpha()] += -v[lay.v_lambda() + block];
                        }
                        ConvexShape::Primitive(ShapePrimitive::PaddedPolytope {
                            radius,
                            a,
                            ..
                        }) => {
                            // Last row: eps'eps - alpha^2 R^2.
                            let last = a.nrows();
                            out[lay.r_feas() + block + last] += -2.0 * alpha * alpha * radius;
                            out[lay.r_stat_alpha()] +=
                                -4.0 * alpha * radius * v[lay.v_lambda() + block + last];
                        }
                        _ => return Err(Error::config("member has no radius parameter")),
                    }
                    touched = true;
                }
            }
            if !touched {
                return Err(Error::config("parameterized member not found in any pair"));
            }
        }
    }
    Ok(out)
}

/// Occurrences of `(body, member)` within pair `idx`: side a and/or side b.
fn member_occurrences<'a>(
    problem: &'a StepProblem<'_>,
    idx: usize,
    body: usize,
    member: usize,
) -> Vec<(bool, &'a ConvexShape)> {
    let pair = &problem.pairs[idx];
    let mut found = Vec::new();
    if pair.body_a == body && pair.member_a_idx == member {
        found.push((true, &pair.member_a.shape));
    }
    if let crate::dynamics::Partner::Body(j) = pair.partner {
        if j == body && pair.member_b_idx == member {
            found.push((false, &pair.member_b.shape));
        }
    }
    found
}
