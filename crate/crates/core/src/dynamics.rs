//! Planar contact dynamics as one square nonlinear complementarity system per
//! time step.
//!
//! For every contact pair, the step residual stacks
//!
//! - the first-order variational integrator rows (momentum balance with
//!   gravity, control, and contact impulses),
//! - the non-penetration row `s_gamma - (alpha - 1)`,
//! - the linearized friction-cone and maximum-dissipation rows,
//! - relaxed complementarity rows `a o b = rho`,
//! - the full KKT conditions of the minimum-scaling collision problem for the
//!   pair, evaluated at the next-step configuration.
//!
//! The contact normal is not an independent variable: it is substituted inline
//! as the normalized dual-weighted gradient of the second side's constraint
//! block, differentiated through the normalization. With a half-space
//! environment this reduces to the plane's constant normal.
//!
//! Solving these rows jointly is what removes the contact-point ambiguity of
//! face-to-face configurations: the collision block alone has a rank-deficient
//! Jacobian there, while the coupled system regains full rank through the
//! moment-balance coupling (see the box-on-ground tests).

use crate::geometry::{
    body_hessian, enumerate_contact_pairs, eval_at_pose, ConvexBundle, ConvexShape,
    FrameEval, OffsetShape, Pose, DEGENERATE_NORMAL_TOL,
};
use crate::solver::{ConePair, NcpProblem};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use serde::Serialize;
use std::cell::RefCell;

/// A planar rigid body with its collision geometry.
#[derive(Clone, Debug)]
pub struct RigidBody2D {
    /// Mass (kg).
    pub mass: f64,
    /// Rotational inertia about the COM (kg m^2).
    pub inertia: f64,
    pub bundle: ConvexBundle,
}

/// A static environment shape.
#[derive(Clone, Debug)]
pub struct EnvShape {
    pub shape: ConvexShape,
    pub pose: Pose,
}

/// Bodies, environment, and contact parameters of a planar mechanism.
#[derive(Clone, Debug)]
pub struct Mechanism {
    pub bodies: Vec<RigidBody2D>,
    pub env: Vec<EnvShape>,
    /// Gravity field (m/s^2), default `[0, -9.81]`.
    pub gravity: Vector2<f64>,
    /// Coulomb friction coefficient shared by all contacts.
    pub mu: f64,
    /// Model tangential friction. When false the contact model is
    /// normal-impulse only (used by the box-on-ground analytics).
    pub friction: bool,
}

impl Mechanism {
    pub fn nq(&self) -> usize {
        3 * self.bodies.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.bodies.is_empty() {
            return Err(Error::config("mechanism needs at least one body"));
        }
        for b in &self.bodies {
            if b.mass <= 0.0 || b.inertia <= 0.0 {
                return Err(Error::config("mass and inertia must be positive"));
            }
            if b.bundle.dim() != 2 {
                return Err(Error::config("dynamics requires planar (2D) shapes"));
            }
            b.bundle.validate()?;
        }
        for e in &self.env {
            if e.shape.dim() != 2 {
                return Err(Error::config("dynamics requires planar (2D) shapes"));
            }
            e.shape.validate()?;
            e.pose.validate()?;
        }
        if self.mu < 0.0 {
            return Err(Error::config("friction coefficient must be nonnegative"));
        }
        Ok(())
    }

    /// All contact pairs: body-body member pairs (i < j), then body-environment
    /// member pairs, in stable order.
    pub fn contact_pairs(&self) -> Vec<PairGeom> {
        let mut pairs = Vec::new();
        for i in 0..self.bodies.len() {
            for j in (i + 1)..self.bodies.len() {
                let ma = self.bodies[i].bundle.effective_members();
                let mb = self.bodies[j].bundle.effective_members();
                for (ia, ib) in enumerate_contact_pairs(&self.bodies[i].bundle, &self.bodies[j].bundle) {
                    pairs.push(PairGeom {
                        body_a: i,
                        partner: Partner::Body(j),
                        member_a: ma[ia].clone(),
                        member_b: mb[ib].clone(),
                        member_a_idx: ia,
                        member_b_idx: ib,
                    });
                }
            }
        }
        for i in 0..self.bodies.len() {
            let ma = self.bodies[i].bundle.effective_members();
            for (e, env) in self.env.iter().enumerate() {
                for (ia, member) in ma.iter().enumerate() {
                    pairs.push(PairGeom {
                        body_a: i,
                        partner: Partner::Env(e),
                        member_a: member.clone(),
                        member_b: OffsetShape {
                            shape: env.shape.clone(),
                            offset: env.pose.clone(),
                        },
                        member_a_idx: ia,
                        member_b_idx: 0,
                    });
                }
            }
        }
        pairs
    }
}

/// Second side of a contact pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Partner {
    Body(usize),
    Env(usize),
}

/// One contact pair: a body member against a body or environment member.
///
/// For body members the stored offset is relative to the body frame; for
/// environment members it is the world pose.
#[derive(Clone, Debug)]
pub struct PairGeom {
    pub body_a: usize,
    pub partner: Partner,
    pub member_a: OffsetShape,
    pub member_b: OffsetShape,
    /// Indices within each side's effective member list.
    pub member_a_idx: usize,
    pub member_b_idx: usize,
}

/// Configurations around one step: `q_prev`, `q`, control `u`, and `dt`.
#[derive(Clone, Debug)]
pub struct MechanismState {
    pub q_prev: DVector<f64>,
    pub q: DVector<f64>,
    /// Generalized control wrench per body, applied as the impulse `u * dt`.
    pub u: DVector<f64>,
    pub dt: f64,
}

impl MechanismState {
    pub fn at_rest(q: DVector<f64>, dt: f64) -> Self {
        let n = q.len();
        MechanismState { q_prev: q.clone(), q, u: DVector::zeros(n), dt }
    }

    pub fn validate(&self, mech: &Mechanism) -> Result<()> {
        let nq = mech.nq();
        if self.q.len() != nq || self.q_prev.len() != nq || self.u.len() != nq {
            return Err(Error::config("state dimension mismatch"));
        }
        if !(self.dt > 0.0) {
            return Err(Error::config("dt must be positive"));
        }
        Ok(())
    }
}

/// 2D cross product `r x f`.
#[inline]
pub fn cross2(r: &Vector2<f64>, f: &Vector2<f64>) -> f64 {
    r.x * f.y - r.y * f.x
}

/// 90-degree rotation `[-y, x]`.
#[inline]
pub fn perp(v: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(-v.y, v.x)
}

/// A point force on one body, for assembling dynamics residuals.
#[derive(Clone, Copy, Debug)]
pub struct ContactWrench {
    pub body: usize,
    pub point: Vector2<f64>,
    pub force: Vector2<f64>,
}

/// Variational-integrator residual: momentum balance per body minus the given
/// contact wrenches (torque arms about each body's COM at `q_plus`).
pub fn dynamics_residual(
    q_plus: &DVector<f64>,
    state: &MechanismState,
    mech: &Mechanism,
    wrenches: &[ContactWrench],
) -> DVector<f64> {
    let mut r = free_dynamics_residual(q_plus, state, mech);
    for w in wrenches {
        let x = Vector2::new(q_plus[3 * w.body], q_plus[3 * w.body + 1]);
        r[3 * w.body] -= w.force.x;
        r[3 * w.body + 1] -= w.force.y;
        r[3 * w.body + 2] -= cross2(&(w.point - x), &w.force);
    }
    r
}

/// Momentum-balance rows with gravity and control impulses but no contact.
pub fn free_dynamics_residual(
    q_plus: &DVector<f64>,
    state: &MechanismState,
    mech: &Mechanism,
) -> DVector<f64> {
    let dt = state.dt;
    let mut r = DVector::zeros(mech.nq());
    for (i, body) in mech.bodies.iter().enumerate() {
        let o = 3 * i;
        for axis in 0..2 {
            r[o + axis] = body.mass / dt
                * (q_plus[o + axis] - 2.0 * state.q[o + axis] + state.q_prev[o + axis])
                - body.mass * mech.gravity[axis] * dt
                - state.u[o + axis] * dt;
        }
        r[o + 2] = body.inertia / dt
            * (q_plus[o + 2] - 2.0 * state.q[o + 2] + state.q_prev[o + 2])
            - state.u[o + 2] * dt;
    }
    r
}

/// Contact-wrench maps for one pair at a given point and normal.
///
/// `n_*` maps the scalar normal impulse into each body's generalized
/// coordinates; `p_*` maps the two-component tangential impulse. The maps of
/// the two bodies apply equal and opposite forces at the shared point, so the
/// pair's total wrench about any fixed frame vanishes identically.
#[derive(Clone, Debug)]
pub struct ContactJacobians {
    pub n_a: DVector<f64>,
    pub p_a: DMatrix<f64>,
    pub n_b: Option<DVector<f64>>,
    pub p_b: Option<DMatrix<f64>>,
}

/// Build the normal/tangential contact maps for a pair.
///
/// `n` is the impulse direction on body `a`; the tangent is `perp(n)`. Torque
/// arms use each body's COM.
pub fn contact_jacobians(
    p: &Vector2<f64>,
    n: &Vector2<f64>,
    com_a: &Vector2<f64>,
    com_b: Option<&Vector2<f64>>,
) -> ContactJacobians {
    let t = perp(n);
    let arm_a = p - com_a;
    let n_a = DVector::from_vec(vec![n.x, n.y, cross2(&arm_a, n)]);
    let p_a = DMatrix::from_row_slice(
        2,
        3,
        &[t.x, t.y, cross2(&arm_a, &t), -t.x, -t.y, -cross2(&arm_a, &t)],
    );
    let (n_b, p_b) = match com_b {
        Some(cb) => {
            let arm_b = p - cb;
            (
                Some(DVector::from_vec(vec![-n.x, -n.y, -cross2(&arm_b, n)])),
                Some(DMatrix::from_row_slice(
                    2,
                    3,
                    &[
                        -t.x, -t.y, -cross2(&arm_b, &t), t.x, t.y, cross2(&arm_b, &t),
                    ],
                )),
            )
        }
        None => (None, None),
    };
    ContactJacobians { n_a, p_a, n_b, p_b }
}

/// Index layout of one pair's variable/residual block.
#[derive(Clone, Copy, Debug)]
pub struct PairLayout {
    pub base_v: usize,
    pub base_r: usize,
    pub ma: usize,
    pub mb: usize,
    pub ka: usize,
    pub kb: usize,
    pub friction: bool,
}

impl PairLayout {
    pub fn ng(&self) -> usize {
        self.ma + self.mb + 1
    }
    fn head(&self) -> usize {
        if self.friction {
            8
        } else {
            2
        }
    }
    pub fn v_gamma(&self) -> usize {
        self.base_v
    }
    pub fn v_sgamma(&self) -> usize {
        self.base_v + 1
    }
    pub fn v_psi(&self) -> usize {
        self.base_v + 2
    }
    pub fn v_spsi(&self) -> usize {
        self.base_v + 3
    }
    pub fn v_beta(&self) -> usize {
        self.base_v + 4
    }
    pub fn v_sbeta(&self) -> usize {
        self.base_v + 6
    }
    pub fn v_p(&self) -> usize {
        self.base_v + self.head()
    }
    pub fn v_alpha(&self) -> usize {
        self.v_p() + 2
    }
    pub fn v_eps_a(&self) -> usize {
        self.v_alpha() + 1
    }
    pub fn v_eps_b(&self) -> usize {
        self.v_eps_a() + self.ka
    }
    pub fn v_lambda(&self) -> usize {
        self.v_eps_b() + self.kb
    }
    pub fn v_s(&self) -> usize {
        self.v_lambda() + self.ng()
    }
    pub fn len_v(&self) -> usize {
        self.head() + 3 + self.ka + self.kb + 2 * self.ng()
    }

    pub fn r_sgamma(&self) -> usize {
        self.base_r
    }
    pub fn r_spsi(&self) -> usize {
        self.base_r + 1
    }
    pub fn r_sbeta(&self) -> usize {
        self.base_r + 2
    }
    pub fn r_comp_gamma(&self) -> usize {
        self.base_r + if self.friction { 4 } else { 1 }
    }
    pub fn r_comp_psi(&self) -> usize {
        self.base_r + 5
    }
    pub fn r_comp_beta(&self) -> usize {
        self.base_r + 6
    }
    pub fn r_stat_alpha(&self) -> usize {
        self.base_r + self.head()
    }
    pub fn r_stat_p(&self) -> usize {
        self.r_stat_alpha() + 1
    }
    pub fn r_stat_eps_a(&self) -> usize {
        self.r_stat_p() + 2
    }
    pub fn r_stat_eps_b(&self) -> usize {
        self.r_stat_eps_a() + self.ka
    }
    pub fn r_feas(&self) -> usize {
        self.r_stat_eps_b() + self.kb
    }
    pub fn r_comp_col(&self) -> usize {
        self.r_feas() + self.ng()
    }
}

/// One side of a pair evaluated at the current iterate.
struct SideCtx {
    /// Body index, or None for environment members.
    body: Option<usize>,
    frame: FrameEval,
    lam: DVector<f64>,
    /// `dR_body/dtheta * offset_translation`: chains member-pose derivatives
    /// to the owning body's orientation. Zero for env members.
    cvec: Vector2<f64>,
}

impl SideCtx {
    /// Writes `dQ/dq_body` columns given `dQ/dp` and `dQ/dtheta_member`,
    /// using translation invariance (`dQ/dx_member = -dQ/dp`).
    fn scatter_q(
        &self,
        out: &mut DMatrix<f64>,
        rows: usize,
        row0: usize,
        dq_dp: &DMatrix<f64>,
        dq_dth: &DVector<f64>,
    ) {
        let Some(body) = self.body else { return };
        let col = 3 * body;
        for i in 0..rows {
            out[(row0 + i, col)] += -dq_dp[(i, 0)];
            out[(row0 + i, col + 1)] += -dq_dp[(i, 1)];
            out[(row0 + i, col + 2)] += dq_dth[i]
                - dq_dp[(i, 0)] * self.cvec.x
                - dq_dp[(i, 1)] * self.cvec.y;
        }
    }
}

/// The assembled single-level step problem.
pub struct StepProblem<'a> {
    pub mech: &'a Mechanism,
    pub state: &'a MechanismState,
    pub pairs: Vec<PairGeom>,
    pub layouts: Vec<PairLayout>,
    pub nq: usize,
    dim: usize,
    /// Default relaxation used by the standalone residual helpers.
    pub rho: f64,
    /// Per-pair fallback normal used when the dual-weighted gradient is
    /// degenerate (kept constant in the Jacobian when active).
    fallback_normals: Vec<RefCell<Vector2<f64>>>,
}

/// Assemble the single-level residual and Jacobian for one step.
pub fn build_step_problem<'a>(
    mech: &'a Mechanism,
    state: &'a MechanismState,
    rho: f64,
) -> Result<StepProblem<'a>> {
    mech.validate()?;
    state.validate(mech)?;
    let pairs = mech.contact_pairs();
    let nq = mech.nq();
    let mut layouts = Vec::with_capacity(pairs.len());
    let mut base_v = nq;
    let mut base_r = nq;
    for pair in &pairs {
        pair.member_a.shape.validate()?;
        pair.member_b.shape.validate()?;
        if pair.member_a.shape.scaling_invariant() && pair.member_b.shape.scaling_invariant() {
            return Err(Error::config("contact pair unbounded in scaling"));
        }
        let lay = PairLayout {
            base_v,
            base_r,
            ma: pair.member_a.shape.constraint_dim(),
            mb: pair.member_b.shape.constraint_dim(),
            ka: pair.member_a.shape.aux_dim(),
            kb: pair.member_b.shape.aux_dim(),
            friction: mech.friction,
        };
        base_v += lay.len_v();
        base_r += lay.len_v();
        layouts.push(lay);
    }
    let fallback_normals = pairs
        .iter()
        .map(|_| RefCell::new(Vector2::new(0.0, 1.0)))
        .collect();
    Ok(StepProblem {
        mech,
        state,
        pairs,
        layouts,
        nq,
        dim: base_v,
        rho,
        fallback_normals,
    })
}

impl StepProblem<'_> {
    /// Body pose of body `i` at the next-step configuration.
    fn body_pose(&self, v: &DVector<f64>, i: usize) -> Pose {
        Pose::planar(v[3 * i], v[3 * i + 1], v[3 * i + 2])
    }

    /// World pose of one pair side plus the body-orientation chain vector.
    fn side_pose(
        &self,
        v: &DVector<f64>,
        body: Option<usize>,
        member: &OffsetShape,
    ) -> (Pose, Vector2<f64>) {
        match body {
            Some(i) => {
                let bp = self.body_pose(v, i);
                let world = bp.compose(&member.offset);
                let dr = bp.rotation_dtheta();
                let c = &dr * &member.offset.x;
                (world, Vector2::new(c[0], c[1]))
            }
            None => (member.offset.clone(), Vector2::zeros()),
        }
    }

    fn side_ctx(
        &self,
        v: &DVector<f64>,
        pair_idx: usize,
        first: bool,
    ) -> Result<SideCtx> {
        let pair = &self.pairs[pair_idx];
        let lay = &self.layouts[pair_idx];
        let (body, member, k, m, idx_eps, idx_lam) = if first {
            (
                Some(pair.body_a),
                &pair.member_a,
                lay.ka,
                lay.ma,
                lay.v_eps_a(),
                lay.v_lambda(),
            )
        } else {
            let body = match pair.partner {
                Partner::Body(j) => Some(j),
                Partner::Env(_) => None,
            };
            (
                body,
                &pair.member_b,
                lay.kb,
                lay.mb,
                lay.v_eps_b(),
                lay.v_lambda() + lay.ma,
            )
        };
        let (pose, cvec) = self.side_pose(v, body, member);
        let p = v.rows(lay.v_p(), 2).into_owned();
        let alpha = v[lay.v_alpha()];
        let eps = v.rows(idx_eps, k).into_owned();
        let lam = v.rows(idx_lam, m).into_owned();
        let frame = eval_at_pose(&member.shape, &pose, &p, alpha, &eps)?;
        Ok(SideCtx { body, frame, lam, cvec })
    }

    /// Pair normal: unit dual-weighted gradient of the second side, which is
    /// the impulse direction on the first body. Falls back to the last
    /// well-defined direction when degenerate.
    fn pair_normal(&self, pair_idx: usize, side_b: &SideCtx) -> (Vector2<f64>, bool) {
        let u = side_b.frame.dual_gradient(&side_b.lam);
        let norm = u.norm();
        if norm < DEGENERATE_NORMAL_TOL {
            (*self.fallback_normals[pair_idx].borrow(), true)
        } else {
            let n = Vector2::new(u[0] / norm, u[1] / norm);
            *self.fallback_normals[pair_idx].borrow_mut() = n;
            (n, false)
        }
    }

    /// Pair normal at a given iterate (impulse direction on the first body).
    pub fn solution_normal(&self, v: &DVector<f64>, pair_idx: usize) -> Vector2<f64> {
        match self.side_ctx(v, pair_idx, false) {
            Ok(side_b) => self.pair_normal(pair_idx, &side_b).0,
            Err(_) => *self.fallback_normals[pair_idx].borrow(),
        }
    }

    /// Residual at the problem's default relaxation.
    pub fn residual_default(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.dim);
        self.residual_inner(v, self.rho, &mut out)?;
        Ok(out)
    }

    /// Residual at an explicit relaxation.
    pub fn residual_at(&self, v: &DVector<f64>, rho: f64) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.dim);
        self.residual_inner(v, rho, &mut out)?;
        Ok(out)
    }

    /// Analytic Jacobian.
    pub fn jacobian_at(&self, v: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.dim, self.dim);
        self.jacobian_inner(v, &mut out)?;
        Ok(out)
    }

    /// Ballistic initial iterate: predicted free flight, contact blocks at the
    /// cone center, split points projected toward the partner.
    pub fn init(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim);
        let nb = self.mech.bodies.len();
        let dt = self.state.dt;
        for i in 0..nb {
            let o = 3 * i;
            for c in 0..3 {
                let accel = if c < 2 {
                    self.mech.gravity[c] + self.state.u[o + c] / self.mech.bodies[i].mass
                } else {
                    self.state.u[o + c] / self.mech.bodies[i].inertia
                };
                v[o + c] =
                    2.0 * self.state.q[o + c] - self.state.q_prev[o + c] + accel * dt * dt;
            }
        }
        for (idx, lay) in self.layouts.iter().enumerate() {
            v[lay.v_gamma()] = 1.0;
            v[lay.v_sgamma()] = 1.0;
            if lay.friction {
                for j in 0..6 {
                    v[lay.v_psi() + j] = 1.0;
                }
            }
            let (pose_a, _) =
                self.side_pose(&v, Some(self.pairs[idx].body_a), &self.pairs[idx].member_a);
            let partner_body = match self.pairs[idx].partner {
                Partner::Body(j) => Some(j),
                Partner::Env(_) => None,
            };
            let (pose_b, _) = self.side_pose(&v, partner_body, &self.pairs[idx].member_b);
            let p0 = initial_split_point(&pose_a, &self.pairs[idx].member_b.shape, &pose_b);
            v[lay.v_p()] = p0.x;
            v[lay.v_p() + 1] = p0.y;
            v[lay.v_alpha()] = 1.0;
            for j in 0..2 * lay.ng() {
                v[lay.v_lambda() + j] = 1.0;
            }
        }
        v
    }

    fn residual_inner(&self, v: &DVector<f64>, rho: f64, out: &mut DVector<f64>) -> Result<()> {
        out.fill(0.0);
        let free = free_dynamics_residual(
            &v.rows(0, self.nq).into_owned(),
            self.state,
            self.mech,
        );
        out.rows_mut(0, self.nq).copy_from(&free);

        for (idx, lay) in self.layouts.iter().enumerate() {
            let side_a = self.side_ctx(v, idx, true)?;
            let side_b = self.side_ctx(v, idx, false)?;
            let (n, _) = self.pair_normal(idx, &side_b);
            let t = perp(&n);
            let p = Vector2::new(v[lay.v_p()], v[lay.v_p() + 1]);
            let alpha = v[lay.v_alpha()];
            let gamma = v[lay.v_gamma()];
            let (beta1, beta2) = if lay.friction {
                (v[lay.v_beta()], v[lay.v_beta() + 1])
            } else {
                (0.0, 0.0)
            };

            // Contact impulse on body a; equal and opposite on a body partner.
            let force = gamma * n + (beta1 - beta2) * t;
            let ia = self.pairs[idx].body_a;
            let xa = Vector2::new(v[3 * ia], v[3 * ia + 1]);
            out[3 * ia] -= force.x;
            out[3 * ia + 1] -= force.y;
            out[3 * ia + 2] -= cross2(&(p - xa), &force);
            if let Partner::Body(j) = self.pairs[idx].partner {
                let xb = Vector2::new(v[3 * j], v[3 * j + 1]);
                out[3 * j] += force.x;
                out[3 * j + 1] += force.y;
                out[3 * j + 2] += cross2(&(p - xb), &force);
            }

            // Non-penetration: s_gamma = phi = alpha - 1.
            out[lay.r_sgamma()] = v[lay.v_sgamma()] - (alpha - 1.0);
            out[lay.r_comp_gamma()] = gamma * v[lay.v_sgamma()] - rho;

            if lay.friction {
                let psi = v[lay.v_psi()];
                out[lay.r_spsi()] =
                    v[lay.v_spsi()] - (self.mech.mu * gamma - beta1 - beta2);
                let vrel = self.relative_velocity(v, idx, &p);
                let tv = t.dot(&vrel);
                out[lay.r_sbeta()] = v[lay.v_sbeta()] - (tv + psi);
                out[lay.r_sbeta() + 1] = v[lay.v_sbeta() + 1] - (-tv + psi);
                out[lay.r_comp_psi()] = psi * v[lay.v_spsi()] - rho;
                out[lay.r_comp_beta()] = beta1 * v[lay.v_sbeta()] - rho;
                out[lay.r_comp_beta() + 1] = beta2 * v[lay.v_sbeta() + 1] - rho;
            }

            // Embedded collision KKT rows.
            let lam_alpha = v[lay.v_lambda() + lay.ma + lay.mb];
            out[lay.r_stat_alpha()] = 1.0
                + side_a.frame.dual_alpha(&side_a.lam)
                + side_b.frame.dual_alpha(&side_b.lam)
                - lam_alpha;
            let stat_p =
                side_a.frame.dual_gradient(&side_a.lam) + side_b.frame.dual_gradient(&side_b.lam);
            out[lay.r_stat_p()] = stat_p[0];
            out[lay.r_stat_p() + 1] = stat_p[1];
            let se_a = side_a.frame.dual_eps(&side_a.lam);
            for i in 0..lay.ka {
                out[lay.r_stat_eps_a() + i] = se_a[i];
            }
            let se_b = side_b.frame.dual_eps(&side_b.lam);
            for i in 0..lay.kb {
                out[lay.r_stat_eps_b() + i] = se_b[i];
            }
            let feas = lay.r_feas();
            for i in 0..lay.ma {
                out[feas + i] = v[lay.v_s() + i] + side_a.frame.g[i];
            }
            for i in 0..lay.mb {
                out[feas + lay.ma + i] = v[lay.v_s() + lay.ma + i] + side_b.frame.g[i];
            }
            out[feas + lay.ma + lay.mb] = v[lay.v_s() + lay.ng() - 1] - alpha;
            let comp = lay.r_comp_col();
            for i in 0..lay.ng() {
                out[comp + i] = v[lay.v_lambda() + i] * v[lay.v_s() + i] - rho;
            }
        }
        Ok(())
    }

    /// Relative velocity of body a's contact material point w.r.t. the
    /// partner's, using finite differences of the configurations.
    fn relative_velocity(&self, v: &DVector<f64>, idx: usize, p: &Vector2<f64>) -> Vector2<f64> {
        let dt = self.state.dt;
        let ia = self.pairs[idx].body_a;
        let vel_of = |i: usize| -> Vector2<f64> {
            let xp = Vector2::new(v[3 * i], v[3 * i + 1]);
            let xc = Vector2::new(self.state.q[3 * i], self.state.q[3 * i + 1]);
            let omega = (v[3 * i + 2] - self.state.q[3 * i + 2]) / dt;
            (xp - xc) / dt + omega * perp(&(p - xp))
        };
        match self.pairs[idx].partner {
            Partner::Body(j) => vel_of(ia) - vel_of(j),
            Partner::Env(_) => vel_of(ia),
        }
    }

    fn jacobian_inner(&self, v: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        out.fill(0.0);
        let dt = self.state.dt;
        // Inertia blocks.
        for (i, body) in self.mech.bodies.iter().enumerate() {
            let o = 3 * i;
            out[(o, o)] = body.mass / dt;
            out[(o + 1, o + 1)] = body.mass / dt;
            out[(o + 2, o + 2)] = body.inertia / dt;
        }

        for (idx, lay) in self.layouts.iter().enumerate() {
            let side_a = self.side_ctx(v, idx, true)?;
            let side_b = self.side_ctx(v, idx, false)?;
            let alpha = v[lay.v_alpha()];
            let eps_a = v.rows(lay.v_eps_a(), lay.ka).into_owned();
            let eps_b = v.rows(lay.v_eps_b(), lay.kb).into_owned();
            let ha = body_hessian(
                &self.pairs[idx].member_a.shape,
                &side_a.frame.w,
                alpha,
                &eps_a,
                &side_a.lam,
            )?;
            let hb = body_hessian(
                &self.pairs[idx].member_b.shape,
                &side_b.frame.w,
                alpha,
                &eps_b,
                &side_b.lam,
            )?;
            self.pair_jacobian(v, idx, lay, &side_a, &side_b, &ha, &hb, out);
        }
        Ok(())
    }

    /// Everything the pair contributes to the Jacobian.
    #[allow(clippy::too_many_arguments)]
    fn pair_jacobian(
        &self,
        v: &DVector<f64>,
        idx: usize,
        lay: &PairLayout,
        side_a: &SideCtx,
        side_b: &SideCtx,
        ha: &DMatrix<f64>,
        hb: &DMatrix<f64>,
        out: &mut DMatrix<f64>,
    ) {
        let dt = self.state.dt;
        let d = 2usize;
        let p = Vector2::new(v[lay.v_p()], v[lay.v_p() + 1]);
        let _alpha = v[lay.v_alpha()];
        let gamma = v[lay.v_gamma()];
        let (beta1, beta2) = if lay.friction {
            (v[lay.v_beta()], v[lay.v_beta() + 1])
        } else {
            (0.0, 0.0)
        };
        let (n, degenerate) = self.pair_normal(idx, side_b);
        let t = perp(&n);
        let force = gamma * n + (beta1 - beta2) * t;
        let ia = self.pairs[idx].body_a;
        let partner_body = match self.pairs[idx].partner {
            Partner::Body(j) => Some(j),
            Partner::Env(_) => None,
        };

        // --- Normal direction derivative: n = u / |u| with u the side-b
        // dual-weighted gradient. Columns: p, alpha, eps_b, lambda_b, q_b.
        // When the fallback normal is active it is treated as constant.
        let nv = DVector::from_vec(vec![n.x, n.y]);
        let u = side_b.frame.dual_gradient(&side_b.lam);
        let unorm = u.norm();
        let proj = if degenerate {
            DMatrix::zeros(d, d)
        } else {
            (DMatrix::identity(d, d) - &nv * nv.transpose()) / unorm
        };
        let rt_b = side_b.frame.rot.transpose();
        let hb_ww = hb.view((0, 0), (d, d)).into_owned();
        let du_dp = &side_b.frame.rot * &hb_ww * &rt_b;
        let du_dalpha = &side_b.frame.rot * hb.view((0, d), (d, 1)).into_owned();
        let du_deps = &side_b.frame.rot * hb.view((0, d + 1), (d, lay.kb)).into_owned();
        let du_dlam = side_b.frame.g_p().transpose();
        // d u / d theta_member for side b.
        let du_dth = &side_b.frame.drot * (side_b.frame.gw_t_lambda(&side_b.lam))
            + &side_b.frame.rot * (&hb_ww * &side_b.frame.dw_dtheta);
        let dn_dp = &proj * &du_dp;
        let dn_dalpha = &proj * &du_dalpha;
        let dn_deps = &proj * &du_deps;
        let dn_dlam = &proj * &du_dlam;
        let dn_dth = &proj * &du_dth;

        // Collect dn/d(col) applied through a 2-row carrier into target rows.
        // dyn rows for body a: residual -= force, torque row.
        let arm_a = p - Vector2::new(v[3 * ia], v[3 * ia + 1]);
        let arms: Vec<(usize, f64, Vector2<f64>)> = {
            let mut list = vec![(ia, 1.0, arm_a)];
            if let Some(j) = partner_body {
                list.push((j, -1.0, p - Vector2::new(v[3 * j], v[3 * j + 1])));
            }
            list
        };

        // dF/dn = gamma * I + (b1 - b2) * Perp90.
        let perp90 = Matrix2::new(0.0, -1.0, 1.0, 0.0);
        let df_dn = DMatrix::from_row_slice(
            2,
            2,
            &[gamma, -(beta1 - beta2), beta1 - beta2, gamma],
        );

        // Scatter a force-direction derivative dF (2 x c) into the dynamics
        // rows of each attached body at columns col0..col0+c.
        let scatter_force = |out: &mut DMatrix<f64>, col0: usize, df: &DMatrix<f64>| {
            for (body, sign, arm) in &arms {
                for c in 0..df.ncols() {
                    let fx = df[(0, c)];
                    let fy = df[(1, c)];
                    out[(3 * body, col0 + c)] -= sign * fx;
                    out[(3 * body + 1, col0 + c)] -= sign * fy;
                    out[(3 * body + 2, col0 + c)] -= sign * (arm.x * fy - arm.y * fx);
                }
            }
        };

        // Force columns via the normal: p, alpha, eps_b, lambda_b, q_b.
        let df_cols_p = (&df_dn * &dn_dp).into_owned();
        scatter_force(out, lay.v_p(), &df_cols_p);
        let df_cols_alpha = (&df_dn * &dn_dalpha).into_owned();
        scatter_force(out, lay.v_alpha(), &df_cols_alpha);
        if lay.kb > 0 {
            let dfe = (&df_dn * &dn_deps).into_owned();
            scatter_force(out, lay.v_eps_b(), &dfe);
        }
        let dfl = (&df_dn * &dn_dlam).into_owned();
        scatter_force(out, lay.v_lambda() + lay.ma, &dfl);
        if let Some(jb) = side_b.body {
            // q_b columns: translation via -dn/dp, rotation via chain.
            let dn_dx = (-&dn_dp).into_owned();
            let dn_dthb = (&dn_dth - &dn_dp * DVector::from_vec(vec![side_b.cvec.x, side_b.cvec.y]))
                .into_owned();
            let dfx = (&df_dn * &dn_dx).into_owned();
            scatter_force(out, 3 * jb, &dfx);
            let dfth = (&df_dn * &dn_dthb).into_owned();
            let dfth_m = DMatrix::from_column_slice(2, 1, &[dfth[0], dfth[1]]);
            scatter_force(out, 3 * jb + 2, &dfth_m);
        }

        // Direct force columns: gamma, beta.
        let n_col = DMatrix::from_column_slice(2, 1, &[n.x, n.y]);
        scatter_force(out, lay.v_gamma(), &n_col);
        if lay.friction {
            let t_col = DMatrix::from_column_slice(2, 1, &[t.x, t.y]);
            let tneg = DMatrix::from_column_slice(2, 1, &[-t.x, -t.y]);
            scatter_force(out, lay.v_beta(), &t_col);
            scatter_force(out, lay.v_beta() + 1, &tneg);
        }

        // Torque extras: the arm p - x_body also depends on p and x_body.
        for (body, sign, _arm) in &arms {
            // d torque/d p at fixed force: [F_y, -F_x].
            out[(3 * body + 2, lay.v_p())] -= sign * force.y;
            out[(3 * body + 2, lay.v_p() + 1)] -= sign * (-force.x);
            // d torque/d x_body = -(d/dp).
            out[(3 * body + 2, 3 * body)] -= sign * (-force.y);
            out[(3 * body + 2, 3 * body + 1)] -= sign * force.x;
        }

        // --- s_gamma row.
        out[(lay.r_sgamma(), lay.v_sgamma())] = 1.0;
        out[(lay.r_sgamma(), lay.v_alpha())] = -1.0;
        // comp gamma.
        out[(lay.r_comp_gamma(), lay.v_gamma())] = v[lay.v_sgamma()];
        out[(lay.r_comp_gamma(), lay.v_sgamma())] = gamma;

        if lay.friction {
            let psi = v[lay.v_psi()];
            // s_psi row: s_psi - mu*gamma + beta1 + beta2.
            out[(lay.r_spsi(), lay.v_spsi())] = 1.0;
            out[(lay.r_spsi(), lay.v_gamma())] = -self.mech.mu;
            out[(lay.r_spsi(), lay.v_beta())] = 1.0;
            out[(lay.r_spsi(), lay.v_beta() + 1)] = 1.0;

            // s_beta rows: s_b - (sign * t.v_rel + psi).
            let vrel = self.relative_velocity(v, idx, &p);
            for (k, sign) in [(0usize, 1.0f64), (1, -1.0)] {
                let row = lay.r_sbeta() + k;
                out[(row, lay.v_sbeta() + k)] = 1.0;
                out[(row, lay.v_psi())] = -1.0;
                // d/d t through n: -(sign) * (dt/dcol)^T vrel; dt = perp90 * dn.
                let vtp = perp90.transpose() * vrel; // (dt^T vrel) = (perp90 dn)^T vrel
                let carrier = DVector::from_vec(vec![vtp.x, vtp.y]);
                let tang_cols = |out: &mut DMatrix<f64>, col0: usize, dn: &DMatrix<f64>| {
                    for c in 0..dn.ncols() {
                        let val = carrier[0] * dn[(0, c)] + carrier[1] * dn[(1, c)];
                        out[(row, col0 + c)] += -sign * val;
                    }
                };
                tang_cols(out, lay.v_p(), &dn_dp);
                tang_cols(out, lay.v_alpha(), &dn_dalpha);
                if lay.kb > 0 {
                    tang_cols(out, lay.v_eps_b(), &dn_deps);
                }
                tang_cols(out, lay.v_lambda() + lay.ma, &dn_dlam);
                if let Some(jb) = side_b.body {
                    let dn_dx = (-&dn_dp).into_owned();
                    tang_cols(out, 3 * jb, &dn_dx);
                    let dn_dthb = (&dn_dth
                        - &dn_dp * DVector::from_vec(vec![side_b.cvec.x, side_b.cvec.y]))
                    .into_owned();
                    let dn_dthb_m = DMatrix::from_column_slice(2, 1, &[dn_dthb[0], dn_dthb[1]]);
                    tang_cols(out, 3 * jb + 2, &dn_dthb_m);
                }

                // d/d v_rel at fixed t: -(sign) * t^T dvrel/dcol.
                let ia_body = ia;
                let vel_cols = |out: &mut DMatrix<f64>, body: usize, body_sign: f64| {
                    let xp = Vector2::new(v[3 * body], v[3 * body + 1]);
                    let omega = (v[3 * body + 2] - self.state.q[3 * body + 2]) / dt;
                    // dvrel/dx_body: I/dt from the finite difference plus
                    // -omega*perp90 from the moving arm perp(p - x).
                    let dv_dx = body_sign * (Matrix2::identity() / dt - omega * perp90);
                    let tv = t.transpose() * dv_dx;
                    out[(row, 3 * body)] += -sign * tv[(0, 0)];
                    out[(row, 3 * body + 1)] += -sign * tv[(0, 1)];
                    // dvrel/dtheta_body = body_sign * perp(p - xp) / dt.
                    let dv_dth = body_sign * perp(&(p - xp)) / dt;
                    out[(row, 3 * body + 2)] += -sign * t.dot(&dv_dth);
                    // dvrel/dp = body_sign * omega * perp90.
                    let dv_dp = body_sign * omega * perp90;
                    let tvp = t.transpose() * dv_dp;
                    out[(row, lay.v_p())] += -sign * tvp[(0, 0)];
                    out[(row, lay.v_p() + 1)] += -sign * tvp[(0, 1)];
                };
                vel_cols(out, ia_body, 1.0);
                if let Some(j) = partner_body {
                    vel_cols(out, j, -1.0);
                }
            }

            out[(lay.r_comp_psi(), lay.v_psi())] = v[lay.v_spsi()];
            out[(lay.r_comp_psi(), lay.v_spsi())] = psi;
            for k in 0..2 {
                out[(lay.r_comp_beta() + k, lay.v_beta() + k)] = v[lay.v_sbeta() + k];
                out[(lay.r_comp_beta() + k, lay.v_sbeta() + k)] = v[lay.v_beta() + k];
            }
        }

        // --- Embedded collision KKT block (mirrors the collision module, plus
        // configuration columns for body-owned sides).
        let sides = [
            (side_a, ha, lay.ka, lay.ma, lay.v_eps_a(), lay.v_lambda(), lay.r_stat_eps_a()),
            (
                side_b,
                hb,
                lay.kb,
                lay.mb,
                lay.v_eps_b(),
                lay.v_lambda() + lay.ma,
                lay.r_stat_eps_b(),
            ),
        ];
        for (side, h, k, m, idx_eps, idx_lam, row_eps) in sides {
            let rt = side.frame.rot.transpose();
            let h_ww = h.view((0, 0), (d, d)).into_owned();

            // stat_alpha row.
            let ra = lay.r_stat_alpha();
            let da_dp = (h.view((0, d), (d, 1)).transpose() * &rt).into_owned();
            out[(ra, lay.v_p())] += da_dp[(0, 0)];
            out[(ra, lay.v_p() + 1)] += da_dp[(0, 1)];
            out[(ra, lay.v_alpha())] += h[(d, d)];
            for j in 0..k {
                out[(ra, idx_eps + j)] += h[(d, d + 1 + j)];
            }
            let g_alpha = side.frame.g_alpha();
            for j in 0..m {
                out[(ra, idx_lam + j)] += g_alpha[j];
            }
            let da_dth = h.view((d, 0), (1, d)) * &side.frame.dw_dtheta;
            side.scatter_q(
                out,
                1,
                ra,
                &da_dp,
                &DVector::from_vec(vec![da_dth[(0, 0)]]),
            );

            // stat_p rows.
            let rp = lay.r_stat_p();
            let dp_dp = (&side.frame.rot * &h_ww * &rt).into_owned();
            add_block(out, rp, lay.v_p(), &dp_dp);
            let dp_da = (&side.frame.rot * h.view((0, d), (d, 1))).into_owned();
            add_block(out, rp, lay.v_alpha(), &dp_da);
            if k > 0 {
                let dp_de = (&side.frame.rot * h.view((0, d + 1), (d, k))).into_owned();
                add_block(out, rp, idx_eps, &dp_de);
            }
            let gp_t = side.frame.g_p().transpose();
            add_block(out, rp, idx_lam, &gp_t);
            let dp_dth = &side.frame.drot * side.frame.gw_t_lambda(&side.lam)
                + &side.frame.rot * (&h_ww * &side.frame.dw_dtheta);
            side.scatter_q(out, 2, rp, &dp_dp, &dp_dth);

            // stat_eps rows.
            if k > 0 {
                let de_dp = (h.view((d + 1, 0), (k, d)) * &rt).into_owned();
                add_block(out, row_eps, lay.v_p(), &de_dp);
                add_block(
                    out,
                    row_eps,
                    lay.v_alpha(),
                    &h.view((d + 1, d), (k, 1)).into_owned(),
                );
                add_block(
                    out,
                    row_eps,
                    idx_eps,
                    &h.view((d + 1, d + 1), (k, k)).into_owned(),
                );
                let ge_t = side.frame.g_eps().transpose();
                add_block(out, row_eps, idx_lam, &ge_t);
                let de_dth = h.view((d + 1, 0), (k, d)) * &side.frame.dw_dtheta;
                side.scatter_q(out, k, row_eps, &de_dp, &de_dth);
            }
        }
        // -alpha constraint contributes to stat_alpha.
        out[(lay.r_stat_alpha(), lay.v_lambda() + lay.ma + lay.mb)] = -1.0;

        // Feasibility rows.
        let feas = lay.r_feas();
        for (side, row0, m, k, idx_eps) in [
            (side_a, feas, lay.ma, lay.ka, lay.v_eps_a()),
            (side_b, feas + lay.ma, lay.mb, lay.kb, lay.v_eps_b()),
        ] {
            let gp = side.frame.g_p();
            add_block(out, row0, lay.v_p(), &gp);
            let galpha = side.frame.g_alpha();
            for i in 0..m {
                out[(row0 + i, lay.v_alpha())] = galpha[i];
            }
            if k > 0 {
                let ge = side.frame.g_eps();
                add_block(out, row0, idx_eps, &ge);
            }
            let gth = side.frame.g_theta();
            side.scatter_q(out, m, row0, &gp, &gth);
        }
        out[(feas + lay.ma + lay.mb, lay.v_alpha())] = -1.0;
        for i in 0..lay.ng() {
            out[(feas + i, lay.v_s() + i)] = 1.0;
        }

        // Complementarity columns.
        let comp = lay.r_comp_col();
        for i in 0..lay.ng() {
            out[(comp + i, lay.v_lambda() + i)] = v[lay.v_s() + i];
            out[(comp + i, lay.v_s() + i)] = v[lay.v_lambda() + i];
        }
    }
}

/// Initial split point for a pair: the body COM projected onto a half-space
/// boundary when the partner is a plane, the midpoint of the two side origins
/// otherwise.
fn initial_split_point(pose_a: &Pose, shape_b: &ConvexShape, pose_b: &Pose) -> Vector2<f64> {
    let xa = Vector2::new(pose_a.x[0], pose_a.x[1]);
    if let ConvexShape::Primitive(crate::geometry::ShapePrimitive::HalfSpace { a, b }) = shape_b {
        let rot = pose_b.rotation();
        let aw = &rot * a;
        let aw = Vector2::new(aw[0], aw[1]);
        let xb = Vector2::new(pose_b.x[0], pose_b.x[1]);
        let dist = (aw.dot(&(xa - xb)) - b) / aw.norm_squared();
        return xa - dist * aw;
    }
    let xb = Vector2::new(pose_b.x[0], pose_b.x[1]);
    0.5 * (xa + xb)
}

fn add_block(out: &mut DMatrix<f64>, row: usize, col: usize, block: &DMatrix<f64>) {
    for i in 0..block.nrows() {
        for j in 0..block.ncols() {
            out[(row + i, col + j)] += block[(i, j)];
        }
    }
}

impl NcpProblem for StepProblem<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn cone_pairs(&self) -> Vec<ConePair> {
        let mut pairs = Vec::new();
        for lay in &self.layouts {
            pairs.push(ConePair {
                a: lay.v_gamma(),
                b: lay.v_sgamma(),
                row: lay.r_comp_gamma(),
            });
            if lay.friction {
                pairs.push(ConePair { a: lay.v_psi(), b: lay.v_spsi(), row: lay.r_comp_psi() });
                for k in 0..2 {
                    pairs.push(ConePair {
                        a: lay.v_beta() + k,
                        b: lay.v_sbeta() + k,
                        row: lay.r_comp_beta() + k,
                    });
                }
            }
            for i in 0..lay.ng() {
                pairs.push(ConePair {
                    a: lay.v_lambda() + i,
                    b: lay.v_s() + i,
                    row: lay.r_comp_col() + i,
                });
            }
        }
        pairs
    }

    fn residual(&self, v: &DVector<f64>, rho: f64, out: &mut DVector<f64>) {
        if self.residual_inner(v, rho, out).is_err() {
            out.fill(1e50);
        }
    }

    fn jacobian(&self, v: &DVector<f64>, out: &mut DMatrix<f64>) {
        if self.jacobian_inner(v, out).is_err() {
            out.fill(0.0);
            for i in 0..self.dim {
                out[(i, i)] = 1.0;
            }
        }
    }
}

/// Contact data extracted from a converged step solution.
#[derive(Clone, Debug, Serialize)]
pub struct ContactData {
    pub body_a: usize,
    /// Partner body index, or None for environment contacts.
    pub partner_body: Option<usize>,
    pub phi: f64,
    pub p: [f64; 2],
    /// Impulse direction on body a.
    pub n: [f64; 2],
    pub gamma: f64,
    pub beta: [f64; 2],
    pub psi: f64,
}

/// Per-pair contact data `{phi, p, n, gamma, beta}` from a solution vector.
pub fn post_step_contact_data(problem: &StepProblem<'_>, v: &DVector<f64>) -> Vec<ContactData> {
    let mut list = Vec::with_capacity(problem.pairs.len());
    for (idx, lay) in problem.layouts.iter().enumerate() {
        let n = match problem.side_ctx(v, idx, false) {
            Ok(side_b) => problem.pair_normal(idx, &side_b).0,
            Err(_) => *problem.fallback_normals[idx].borrow(),
        };
        let (beta, psi) = if lay.friction {
            ([v[lay.v_beta()], v[lay.v_beta() + 1]], v[lay.v_psi()])
        } else {
            ([0.0, 0.0], 0.0)
        };
        list.push(ContactData {
            body_a: problem.pairs[idx].body_a,
            partner_body: match problem.pairs[idx].partner {
                Partner::Body(j) => Some(j),
                Partner::Env(_) => None,
            },
            phi: v[lay.v_alpha()] - 1.0,
            p: [v[lay.v_p()], v[lay.v_p() + 1]],
            n: [n.x, n.y],
            gamma: v[lay.v_gamma()],
            beta,
            psi,
        });
    }
    list
}
