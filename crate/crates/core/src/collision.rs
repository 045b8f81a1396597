//! Minimum-scaling collision detection between two convex shapes.
//!
//! [`detect`] solves, with the crate's interior-point core,
//!
//! ```text
//! minimize    alpha
//! subject to  g_a(p, alpha, eps_a; pose_a) <= 0
//!             g_b(p, alpha, eps_b; pose_b) <= 0
//!             -alpha <= 0
//! ```
//!
//! i.e. it finds the smallest common scaling of both shapes that still leaves
//! them a shared point `p`. The pseudo signed distance is `phi = alpha - 1`:
//! negative iff the shapes overlap, positive iff they are separated. It is not
//! a metric distance (no triangle inequality).
//!
//! Contact normals come from the duals in linear time,
//! `n_i = (dg_i/dp)^T lambda_i / ||.||` ([`normal_value_sensitivity`]); the
//! implicit-function-theorem route ([`normal_ift`]) solves against the full
//! KKT Jacobian instead and fails by design in face-to-face configurations,
//! where that Jacobian is rank deficient.

use crate::geometry::{
    body_hessian, contact_normal, eval_at_pose, ConvexShape, FrameEval, Pose,
};
use crate::linalg::LuSolver;
use crate::solver::{self, ConePair, NcpProblem, SolveStatus, SolverOptions};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::Serialize;

/// Variable/row layout of one collision KKT system.
///
/// Variables: `[p (d), alpha, eps_a, eps_b, lambda (ng), s (ng)]` with
/// `lambda = [lambda_a, lambda_b, lambda_alpha]`.
/// Rows: `[stat_alpha, stat_p, stat_eps_a, stat_eps_b, s + g, lambda o s]`.
#[derive(Clone, Copy, Debug)]
pub struct CollisionLayout {
    pub d: usize,
    pub ma: usize,
    pub mb: usize,
    pub ka: usize,
    pub kb: usize,
}

impl CollisionLayout {
    pub fn ng(&self) -> usize {
        self.ma + self.mb + 1
    }
    pub fn dim(&self) -> usize {
        self.d + 1 + self.ka + self.kb + 2 * self.ng()
    }
    pub fn idx_p(&self) -> usize {
        0
    }
    pub fn idx_alpha(&self) -> usize {
        self.d
    }
    pub fn idx_eps_a(&self) -> usize {
        self.d + 1
    }
    pub fn idx_eps_b(&self) -> usize {
        self.d + 1 + self.ka
    }
    pub fn idx_lambda(&self) -> usize {
        self.d + 1 + self.ka + self.kb
    }
    pub fn idx_s(&self) -> usize {
        self.idx_lambda() + self.ng()
    }
    pub fn row_stat_alpha(&self) -> usize {
        0
    }
    pub fn row_stat_p(&self) -> usize {
        1
    }
    pub fn row_stat_eps_a(&self) -> usize {
        1 + self.d
    }
    pub fn row_stat_eps_b(&self) -> usize {
        1 + self.d + self.ka
    }
    pub fn row_feas(&self) -> usize {
        1 + self.d + self.ka + self.kb
    }
    pub fn row_comp(&self) -> usize {
        self.row_feas() + self.ng()
    }
}

/// Collision detection posed as a relaxed NCP over the KKT conditions.
pub struct CollisionProblem<'a> {
    pub shape_a: &'a ConvexShape,
    pub pose_a: &'a Pose,
    pub shape_b: &'a ConvexShape,
    pub pose_b: &'a Pose,
    pub layout: CollisionLayout,
}

impl<'a> CollisionProblem<'a> {
    pub fn new(
        shape_a: &'a ConvexShape,
        pose_a: &'a Pose,
        shape_b: &'a ConvexShape,
        pose_b: &'a Pose,
    ) -> Result<Self> {
        shape_a.validate()?;
        shape_b.validate()?;
        pose_a.validate()?;
        pose_b.validate()?;
        let d = shape_a.dim();
        if shape_b.dim() != d || pose_a.dim() != d || pose_b.dim() != d {
            return Err(Error::config("collision pair dimension mismatch"));
        }
        if shape_a.scaling_invariant() && shape_b.scaling_invariant() {
            return Err(Error::config(
                "collision pair is unbounded in the scaling variable (two half-spaces)",
            ));
        }
        let layout = CollisionLayout {
            d,
            ma: shape_a.constraint_dim(),
            mb: shape_b.constraint_dim(),
            ka: shape_a.aux_dim(),
            kb: shape_b.aux_dim(),
        };
        Ok(CollisionProblem { shape_a, pose_a, shape_b, pose_b, layout })
    }

    /// Geometry-informed initial iterate: scaling and split point from the
    /// radial-bound touching estimate, slacks matched to the constraint
    /// values so Newton starts near the relaxed central path.
    pub fn init(&self) -> DVector<f64> {
        let l = &self.layout;
        let mut v = DVector::zeros(l.dim());
        let (p0, alpha0) = pair_start(self.shape_a, self.pose_a, self.shape_b, self.pose_b);
        v.rows_mut(l.idx_p(), l.d).copy_from(&p0);
        v[l.idx_alpha()] = alpha0;
        for i in 0..2 * l.ng() {
            v[l.idx_lambda() + i] = 1.0;
        }
        // Feasibility-informed slacks: s = -g where meaningful.
        let ea = DVector::zeros(l.ka);
        let eb = DVector::zeros(l.kb);
        let ga = eval_at_pose(self.shape_a, self.pose_a, &p0, alpha0, &ea);
        let gb = eval_at_pose(self.shape_b, self.pose_b, &p0, alpha0, &eb);
        if let (Ok(ga), Ok(gb)) = (ga, gb) {
            for i in 0..l.ma {
                v[l.idx_s() + i] = (-ga.g[i]).max(1e-2);
            }
            for i in 0..l.mb {
                v[l.idx_s() + l.ma + i] = (-gb.g[i]).max(1e-2);
            }
            v[l.idx_s() + l.ma + l.mb] = alpha0.max(1e-2);
            // Duals consistent with a moderate initial complementarity level.
            for i in 0..l.ng() {
                v[l.idx_lambda() + i] = (0.1 / v[l.idx_s() + i]).clamp(1e-2, 1.0);
            }
        } else {
            for i in 0..l.ng() {
                v[l.idx_s() + i] = 1.0;
            }
        }
        v
    }

    fn unpack(&self, v: &DVector<f64>) -> Unpacked {
        let l = &self.layout;
        Unpacked {
            p: v.rows(l.idx_p(), l.d).into_owned(),
            alpha: v[l.idx_alpha()],
            eps_a: v.rows(l.idx_eps_a(), l.ka).into_owned(),
            eps_b: v.rows(l.idx_eps_b(), l.kb).into_owned(),
            lam_a: v.rows(l.idx_lambda(), l.ma).into_owned(),
            lam_b: v.rows(l.idx_lambda() + l.ma, l.mb).into_owned(),
            lam_alpha: v[l.idx_lambda() + l.ma + l.mb],
            s: v.rows(l.idx_s(), l.ng()).into_owned(),
        }
    }

    fn evals(&self, u: &Unpacked) -> Result<(FrameEval, FrameEval)> {
        let fa = eval_at_pose(self.shape_a, self.pose_a, &u.p, u.alpha, &u.eps_a)?;
        let fb = eval_at_pose(self.shape_b, self.pose_b, &u.p, u.alpha, &u.eps_b)?;
        Ok((fa, fb))
    }

    /// KKT residual at relaxation `rho` (use `rho = 0` for the exact
    /// conditions).
    pub fn kkt_residual(&self, v: &DVector<f64>, rho: f64) -> Result<DVector<f64>> {
        let mut out = DVector::zeros(self.layout.dim());
        self.residual_inner(v, rho, &mut out)?;
        Ok(out)
    }

    /// Analytic Jacobian of the KKT residual.
    pub fn kkt_jacobian(&self, v: &DVector<f64>) -> Result<DMatrix<f64>> {
        let mut out = DMatrix::zeros(self.layout.dim(), self.layout.dim());
        self.jacobian_inner(v, &mut out)?;
        Ok(out)
    }

    fn residual_inner(
        &self,
        v: &DVector<f64>,
        rho: f64,
        out: &mut DVector<f64>,
    ) -> Result<()> {
        let l = self.layout;
        let u = self.unpack(v);
        let (fa, fb) = self.evals(&u)?;
        out.fill(0.0);
        out[l.row_stat_alpha()] =
            1.0 + fa.dual_alpha(&u.lam_a) + fb.dual_alpha(&u.lam_b) - u.lam_alpha;
        let stat_p = fa.dual_gradient(&u.lam_a) + fb.dual_gradient(&u.lam_b);
        out.rows_mut(l.row_stat_p(), l.d).copy_from(&stat_p);
        out.rows_mut(l.row_stat_eps_a(), l.ka)
            .copy_from(&fa.dual_eps(&u.lam_a));
        out.rows_mut(l.row_stat_eps_b(), l.kb)
            .copy_from(&fb.dual_eps(&u.lam_b));
        let feas = l.row_feas();
        for i in 0..l.ma {
            out[feas + i] = u.s[i] + fa.g[i];
        }
        for i in 0..l.mb {
            out[feas + l.ma + i] = u.s[l.ma + i] + fb.g[i];
        }
        out[feas + l.ma + l.mb] = u.s[l.ma + l.mb] - u.alpha;
        let comp = l.row_comp();
        let lam = v.rows(l.idx_lambda(), l.ng());
        for i in 0..l.ng() {
            out[comp + i] = lam[i] * u.s[i] - rho;
        }
        Ok(())
    }

    fn jacobian_inner(&self, v: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        let l = self.layout;
        let u = self.unpack(v);
        let (fa, fb) = self.evals(&u)?;
        let ha = body_hessian(self.shape_a, &fa.w, u.alpha, &u.eps_a, &u.lam_a)?;
        let hb = body_hessian(self.shape_b, &fb.w, u.alpha, &u.eps_b, &u.lam_b)?;
        out.fill(0.0);

        let mut side = |f: &FrameEval,
                        h: &DMatrix<f64>,
                        k: usize,
                        m: usize,
                        idx_eps: usize,
                        idx_lam: usize,
                        row_stat_eps: usize| {
            let d = l.d;
            let rt = f.rot.transpose();

            // stat_alpha row.
            let ra = l.row_stat_alpha();
            let da_dp = h.view((0, d), (d, 1)).transpose() * &rt;
            for j in 0..d {
                out[(ra, l.idx_p() + j)] += da_dp[(0, j)];
            }
            out[(ra, l.idx_alpha())] += h[(d, d)];
            for j in 0..k {
                out[(ra, idx_eps + j)] += h[(d, d + 1 + j)];
            }
            let g_alpha = f.g_alpha();
            for j in 0..m {
                out[(ra, idx_lam + j)] += g_alpha[j];
            }

            // stat_p rows.
            let rp = l.row_stat_p();
            let dp_dp = &f.rot * h.view((0, 0), (d, d)) * &rt;
            let dp_da = &f.rot * h.view((0, d), (d, 1));
            add_block(out, rp, l.idx_p(), &dp_dp);
            add_block(out, rp, l.idx_alpha(), &dp_da);
            if k > 0 {
                let dp_de = &f.rot * h.view((0, d + 1), (d, k));
                add_block(out, rp, idx_eps, &dp_de);
            }
            let g_p_t = f.g_p().transpose();
            add_block(out, rp, idx_lam, &g_p_t);

            // stat_eps rows.
            if k > 0 {
                let re = row_stat_eps;
                let de_dp = h.view((d + 1, 0), (k, d)) * &rt;
                add_block(out, re, l.idx_p(), &de_dp);
                add_block(out, re, l.idx_alpha(), &h.view((d + 1, d), (k, 1)).into_owned());
                add_block(out, re, idx_eps, &h.view((d + 1, d + 1), (k, k)).into_owned());
                let ge_t = f.g_eps().transpose();
                add_block(out, re, idx_lam, &ge_t);
            }
        };

        side(&fa, &ha, l.ka, l.ma, l.idx_eps_a(), l.idx_lambda(), l.row_stat_eps_a());
        side(&fb, &hb, l.kb, l.mb, l.idx_eps_b(), l.idx_lambda() + l.ma, l.row_stat_eps_b());
        // The -alpha constraint row contributes only to stat_alpha.
        out[(l.row_stat_alpha(), l.idx_lambda() + l.ma + l.mb)] = -1.0;

        // Feasibility rows: s + g.
        let feas = l.row_feas();
        let ga_p = fa.g_p();
        let gb_p = fb.g_p();
        out.view_mut((feas, l.idx_p()), (l.ma, l.d)).copy_from(&ga_p);
        out.view_mut((feas + l.ma, l.idx_p()), (l.mb, l.d)).copy_from(&gb_p);
        let ga_alpha = fa.g_alpha();
        let gb_alpha = fb.g_alpha();
        for i in 0..l.ma {
            out[(feas + i, l.idx_alpha())] = ga_alpha[i];
        }
        for i in 0..l.mb {
            out[(feas + l.ma + i, l.idx_alpha())] = gb_alpha[i];
        }
        out[(feas + l.ma + l.mb, l.idx_alpha())] = -1.0;
        if l.ka > 0 {
            out.view_mut((feas, l.idx_eps_a()), (l.ma, l.ka))
                .copy_from(&fa.g_eps());
        }
        if l.kb > 0 {
            out.view_mut((feas + l.ma, l.idx_eps_b()), (l.mb, l.kb))
                .copy_from(&fb.g_eps());
        }
        for i in 0..l.ng() {
            out[(feas + i, l.idx_s() + i)] = 1.0;
        }

        // Complementarity rows.
        let comp = l.row_comp();
        let lam = v.rows(l.idx_lambda(), l.ng()).into_owned();
        for i in 0..l.ng() {
            out[(comp + i, l.idx_lambda() + i)] = u.s[i];
            out[(comp + i, l.idx_s() + i)] = lam[i];
        }
        Ok(())
    }
}

/// Starting split point and scaling estimate for a shape pair.
///
/// Uses radial bounds for a support-like touching estimate: for two bounded
/// shapes the scaled pair first meets near `alpha = D / (r_a + r_b)` along
/// the center line; against a half-space the estimate uses the plane
/// distance. Keeps far-apart pairs inside Newton's basin, where the naive
/// `alpha = 1` start stalls on the scaling square root.
pub fn pair_start(
    shape_a: &ConvexShape,
    pose_a: &Pose,
    shape_b: &ConvexShape,
    pose_b: &Pose,
) -> (DVector<f64>, f64) {
    let xa = &pose_a.x;
    let xb = &pose_b.x;
    let (p0, alpha0) = match (shape_a.radial_bound(), shape_b.radial_bound()) {
        (Some(ra), Some(rb)) => {
            let diff = xb - xa;
            let dist = diff.norm();
            let alpha0 = (dist / (ra + rb)).clamp(1e-3, 1e9);
            let p0 = if dist > 1e-12 {
                xa + diff * (ra / (ra + rb))
            } else {
                xa.clone()
            };
            (p0, alpha0)
        }
        (Some(ra), None) => plane_start(shape_b, pose_b, xa, ra),
        (None, Some(rb)) => plane_start(shape_a, pose_a, xb, rb),
        (None, None) => ((xa + xb) * 0.5, 1.0),
    };
    // Nudge the split point off any symmetry axis: swept shapes (capsules,
    // cylinders, cones) are nonsmooth exactly on their axes, and the natural
    // starting point often lands there.
    (nudge_off_axis(p0), alpha0)
}

fn nudge_off_axis(mut p: DVector<f64>) -> DVector<f64> {
    for i in 0..p.len() {
        p[i] += 1e-4 * (1.0 + i as f64);
    }
    p
}

/// Touching estimate of a bounded shape (center `x`, radius `r`) against a
/// half-space-like partner.
fn plane_start(
    plane_shape: &ConvexShape,
    plane_pose: &Pose,
    x: &DVector<f64>,
    r: f64,
) -> (DVector<f64>, f64) {
    if let ConvexShape::Primitive(crate::geometry::ShapePrimitive::HalfSpace { a, b }) =
        plane_shape
    {
        let rot = plane_pose.rotation();
        let aw = &rot * a;
        let norm2 = aw.norm_squared();
        let sd = (aw.dot(&(x - &plane_pose.x)) - b) / norm2.sqrt();
        let p0 = x - (sd / norm2.sqrt()) * &aw;
        let alpha0 = if sd > 0.0 { (sd / r).clamp(1e-3, 1e9) } else { 0.5 };
        return (p0, alpha0);
    }
    (x.clone(), 1.0)
}

/// Accumulate `block` into `out` at the given top-left corner.
fn add_block(out: &mut DMatrix<f64>, row: usize, col: usize, block: &DMatrix<f64>) {
    for i in 0..block.nrows() {
        for j in 0..block.ncols() {
            out[(row + i, col + j)] += block[(i, j)];
        }
    }
}

struct Unpacked {
    p: DVector<f64>,
    alpha: f64,
    eps_a: DVector<f64>,
    eps_b: DVector<f64>,
    lam_a: DVector<f64>,
    lam_b: DVector<f64>,
    lam_alpha: f64,
    s: DVector<f64>,
}

impl NcpProblem for CollisionProblem<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn cone_pairs(&self) -> Vec<ConePair> {
        let l = self.layout;
        (0..l.ng())
            .map(|i| ConePair {
                a: l.idx_lambda() + i,
                b: l.idx_s() + i,
                row: l.row_comp() + i,
            })
            .collect()
    }

    fn residual(&self, v: &DVector<f64>, rho: f64, out: &mut DVector<f64>) {
        if self.residual_inner(v, rho, out).is_err() {
            out.fill(1e50);
        }
    }

    fn jacobian(&self, v: &DVector<f64>, out: &mut DMatrix<f64>) {
        if self.jacobian_inner(v, out).is_err() {
            out.fill(0.0);
            for i in 0..self.layout.dim() {
                out[(i, i)] = 1.0;
            }
        }
    }
}

/// Result of one collision solve.
#[derive(Clone, Debug, Serialize)]
pub struct CollisionResult {
    /// Optimal scaling.
    pub alpha: f64,
    /// Pseudo signed distance `alpha - 1`.
    pub phi: f64,
    /// Shared (contact) point.
    pub p: DVector<f64>,
    pub eps_a: DVector<f64>,
    pub eps_b: DVector<f64>,
    /// Stacked duals `[lambda_a, lambda_b, lambda_alpha]`.
    pub lambda: DVector<f64>,
    /// Slacks, same order as the constraint stack.
    pub s: DVector<f64>,
    /// Outward unit normals of each shape at the solution, when well defined.
    pub normal_a: Option<DVector<f64>>,
    pub normal_b: Option<DVector<f64>>,
    pub status: SolveStatus,
    pub iterations: usize,
    pub residual_norm: f64,
    /// Residual trace of the interior-point iterations.
    #[serde(skip)]
    pub trace: Vec<solver::IterationRecord>,
    /// Raw solution vector, reusable for warm starts and sensitivities.
    #[serde(skip)]
    pub v: DVector<f64>,
}

impl CollisionResult {
    pub fn converged(&self) -> bool {
        self.status == SolveStatus::Converged
    }

    pub fn lambda_a(&self, layout: &CollisionLayout) -> DVector<f64> {
        self.lambda.rows(0, layout.ma).into_owned()
    }

    pub fn lambda_b(&self, layout: &CollisionLayout) -> DVector<f64> {
        self.lambda.rows(layout.ma, layout.mb).into_owned()
    }
}

/// Solve the minimum-scaling problem for one shape pair.
///
/// A failed first attempt is retried once from a mirrored starting nudge;
/// swept shapes occasionally ping-pong across their axis nonsmoothness from
/// an unlucky start.
pub fn detect(
    shape_a: &ConvexShape,
    pose_a: &Pose,
    shape_b: &ConvexShape,
    pose_b: &Pose,
    opts: &SolverOptions,
) -> Result<CollisionResult> {
    let problem = CollisionProblem::new(shape_a, pose_a, shape_b, pose_b)?;
    let init = problem.init();
    let first = detect_from(&problem, &init, opts)?;
    if first.converged() {
        return Ok(first);
    }
    let l = &problem.layout;
    let mut retry = problem.init();
    for i in 0..l.d {
        retry[l.idx_p() + i] -= 2.0 * 1e-4 * (1.0 + i as f64);
    }
    let second = detect_from(&problem, &retry, opts)?;
    if second.converged() || second.residual_norm < first.residual_norm {
        Ok(second)
    } else {
        Ok(first)
    }
}

/// Solve from a caller-provided initial iterate (e.g. a warm start).
pub fn detect_from(
    problem: &CollisionProblem<'_>,
    init: &DVector<f64>,
    opts: &SolverOptions,
) -> Result<CollisionResult> {
    let report = solver::solve(problem, init, opts);
    let u = problem.unpack(&report.v);
    let (na, nb) = match problem.evals(&u) {
        Ok((fa, fb)) => (
            contact_normal(&fa, &u.lam_a).ok(),
            contact_normal(&fb, &u.lam_b).ok(),
        ),
        Err(_) => (None, None),
    };
    let mut lambda = DVector::zeros(problem.layout.ng());
    lambda.rows_mut(0, problem.layout.ma).copy_from(&u.lam_a);
    lambda
        .rows_mut(problem.layout.ma, problem.layout.mb)
        .copy_from(&u.lam_b);
    lambda[problem.layout.ng() - 1] = u.lam_alpha;
    Ok(CollisionResult {
        alpha: u.alpha,
        phi: u.alpha - 1.0,
        p: u.p,
        eps_a: u.eps_a,
        eps_b: u.eps_b,
        lambda,
        s: u.s,
        normal_a: na,
        normal_b: nb,
        status: report.status,
        iterations: report.iterations,
        residual_norm: report.residual_norm,
        trace: report.trace,
        v: report.v,
    })
}

/// Contact normals from the optimal duals (value sensitivity).
///
/// Returns `(n_a, n_b)`: the outward unit normal of each shape at the contact,
/// computed from that shape's own constraint block in `O(n_g)` flops with no
/// linear solve. At a converged solution the two are exactly antiparallel.
pub fn normal_value_sensitivity(
    problem: &CollisionProblem<'_>,
    result: &CollisionResult,
) -> Result<(DVector<f64>, DVector<f64>)> {
    let u = problem.unpack(&result.v);
    let (fa, fb) = problem.evals(&u)?;
    Ok((
        contact_normal(&fa, &u.lam_a)?,
        contact_normal(&fb, &u.lam_b)?,
    ))
}

/// Contact normal through full implicit differentiation of the KKT system.
///
/// Returns the unit direction of `d alpha* / d x_a`, the sensitivity of the
/// optimal scaling to the first shape's translation: the direction along which
/// moving shape `a` widens the separation. At a converged solution this equals
/// `-n_a` (and `n_b`) from [`normal_value_sensitivity`].
///
/// Fails with [`Error::RankDeficient`] when the collision Jacobian is
/// singular, which is exactly the face-to-face situation.
pub fn normal_ift(
    problem: &CollisionProblem<'_>,
    result: &CollisionResult,
) -> Result<DVector<f64>> {
    let l = problem.layout;
    let u = problem.unpack(&result.v);
    let (fa, _fb) = problem.evals(&u)?;
    let jac = problem.kkt_jacobian(&result.v)?;

    // Rank check: the face-to-face continuum shows up as a (near) zero
    // singular value of the KKT Jacobian.
    let svd = jac.clone().svd(false, false);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > smax * 1e-10) {
        return Err(Error::RankDeficient(format!(
            "collision KKT Jacobian is rank deficient (sigma_min/sigma_max = {:.3e})",
            smin / smax
        )));
    }

    // d r / d x_a: the pose translation of shape a enters g_a only through
    // p - x_a, so the data derivative is the negated p-derivative of every
    // shape-a block.
    let ha = body_hessian(problem.shape_a, &fa.w, u.alpha, &u.eps_a, &u.lam_a)?;
    let d = l.d;
    let rt = fa.rot.transpose();
    let mut dr_dx = DMatrix::zeros(l.dim(), d);
    let da_dp = ha.view((0, d), (d, 1)).transpose() * &rt;
    for j in 0..d {
        dr_dx[(l.row_stat_alpha(), j)] = -da_dp[(0, j)];
    }
    let dp_dp = &fa.rot * ha.view((0, 0), (d, d)) * &rt;
    for i in 0..d {
        for j in 0..d {
            dr_dx[(l.row_stat_p() + i, j)] = -dp_dp[(i, j)];
        }
    }
    if l.ka > 0 {
        let de_dp = ha.view((d + 1, 0), (l.ka, d)) * &rt;
        for i in 0..l.ka {
            for j in 0..d {
                dr_dx[(l.row_stat_eps_a() + i, j)] = -de_dp[(i, j)];
            }
        }
    }
    let ga_p = fa.g_p();
    for i in 0..l.ma {
        for j in 0..d {
            dr_dx[(l.row_feas() + i, j)] = -ga_p[(i, j)];
        }
    }

    let lu = LuSolver::new(jac)
        .ok_or_else(|| Error::RankDeficient("collision KKT Jacobian".into()))?;
    let mut dalpha_dx = DVector::zeros(d);
    for j in 0..d {
        let rhs = -dr_dx.column(j).into_owned();
        let col = lu
            .solve(&rhs)
            .ok_or_else(|| Error::RankDeficient("collision KKT Jacobian".into()))?;
        dalpha_dx[j] = col[l.idx_alpha()];
    }
    let norm = dalpha_dx.norm();
    if norm < crate::geometry::DEGENERATE_NORMAL_TOL {
        return Err(Error::DegenerateNormal { norm });
    }
    Ok(dalpha_dx / norm)
}
