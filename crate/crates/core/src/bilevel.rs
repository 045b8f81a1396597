//! Bilevel contact stepping: the reference formulation used for comparisons.
//!
//! The outer problem is root finding on the relaxed contact-dynamics rows
//! alone; every evaluation of its residual calls the collision solver per
//! contact pair to obtain the pseudo distance `phi(q_plus)`, contact point
//! `p(q_plus)` and normal `n(q_plus)`. The outer Jacobian differentiates those
//! maps with the implicit function theorem on the inner KKT system when it is
//! invertible and falls back to finite differences of the inner solution map
//! when it is not (face-to-face contact), which is where this formulation
//! degrades: the solution map itself is discontinuous there.
//!
//! The integrator rows, cone parameters, tolerances, and the 30-iteration
//! failure criterion are identical to the single-level path.

use crate::collision::{detect_from, CollisionProblem, CollisionResult};
use crate::dynamics::{
    cross2, free_dynamics_residual, perp, Mechanism, MechanismState, PairGeom, Partner,
};
use crate::geometry::{body_hessian, eval_at_pose, Pose};
use crate::linalg::LuSolver;
use crate::solver::{self, ConePair, NcpProblem, SolveReport, SolverOptions};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, Matrix2, Vector2};
use std::cell::{Cell, RefCell};
use std::collections::HashMap;

/// How the baseline computes the contact normal from inner solutions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormalMethod {
    /// Dual-based value sensitivity (matrix-vector product).
    ValueSensitivity,
    /// Full implicit differentiation; fails on rank-deficient KKT systems.
    Ift,
}

/// Options for one bilevel step.
#[derive(Clone, Debug)]
pub struct BilevelConfig {
    pub outer: SolverOptions,
    pub inner: SolverOptions,
    pub normal_method: NormalMethod,
    /// Step size for the finite-difference fallback of the inner solution map.
    pub fd_step: f64,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        BilevelConfig {
            outer: SolverOptions::default(),
            inner: SolverOptions::collision(),
            normal_method: NormalMethod::ValueSensitivity,
            fd_step: 1e-6,
        }
    }
}

/// Outer variable/row layout for one pair.
#[derive(Clone, Copy, Debug)]
struct OuterLayout {
    base_v: usize,
    base_r: usize,
    friction: bool,
}

impl OuterLayout {
    fn head(&self) -> usize {
        if self.friction {
            8
        } else {
            2
        }
    }
    fn v_gamma(&self) -> usize {
        self.base_v
    }
    fn v_sgamma(&self) -> usize {
        self.base_v + 1
    }
    fn v_psi(&self) -> usize {
        self.base_v + 2
    }
    fn v_spsi(&self) -> usize {
        self.base_v + 3
    }
    fn v_beta(&self) -> usize {
        self.base_v + 4
    }
    fn v_sbeta(&self) -> usize {
        self.base_v + 6
    }
    fn r_sgamma(&self) -> usize {
        self.base_r
    }
    fn r_spsi(&self) -> usize {
        self.base_r + 1
    }
    fn r_sbeta(&self) -> usize {
        self.base_r + 2
    }
    fn r_comp_gamma(&self) -> usize {
        self.base_r + if self.friction { 4 } else { 1 }
    }
    fn r_comp_psi(&self) -> usize {
        self.base_r + 5
    }
    fn r_comp_beta(&self) -> usize {
        self.base_r + 6
    }
}

/// Inner solve outcome for one pair at one configuration.
#[derive(Clone)]
struct InnerData {
    phi: f64,
    p: Vector2<f64>,
    /// Impulse direction on the first body.
    n: Vector2<f64>,
    degenerate: bool,
    v_inner: DVector<f64>,
}

/// The outer problem; inner solves run inside residual/Jacobian evaluations.
pub struct BilevelProblem<'a> {
    pub mech: &'a Mechanism,
    pub state: &'a MechanismState,
    pub pairs: Vec<PairGeom>,
    layouts: Vec<OuterLayout>,
    nq: usize,
    dim: usize,
    config: BilevelConfig,
    cache: RefCell<HashMap<Vec<u64>, Vec<InnerData>>>,
    warm: RefCell<Vec<Option<DVector<f64>>>>,
    fallback_normals: Vec<RefCell<Vector2<f64>>>,
    pub inner_solves: Cell<usize>,
    pub inner_failures: Cell<usize>,
}

impl<'a> BilevelProblem<'a> {
    pub fn new(
        mech: &'a Mechanism,
        state: &'a MechanismState,
        config: BilevelConfig,
    ) -> Result<Self> {
        mech.validate()?;
        state.validate(mech)?;
        let pairs = mech.contact_pairs();
        let nq = mech.nq();
        let per_pair = if mech.friction { 8 } else { 2 };
        let mut layouts = Vec::with_capacity(pairs.len());
        for (i, pair) in pairs.iter().enumerate() {
            if pair.member_a.shape.scaling_invariant() && pair.member_b.shape.scaling_invariant() {
                return Err(Error::config("contact pair unbounded in scaling"));
            }
            layouts.push(OuterLayout {
                base_v: nq + i * per_pair,
                base_r: nq + i * per_pair,
                friction: mech.friction,
            });
        }
        let dim = nq + pairs.len() * per_pair;
        let fallback_normals = pairs.iter().map(|_| RefCell::new(Vector2::new(0.0, 1.0))).collect();
        let warm = RefCell::new(vec![None; pairs.len()]);
        Ok(BilevelProblem {
            mech,
            state,
            pairs,
            layouts,
            nq,
            dim,
            config,
            cache: RefCell::new(HashMap::new()),
            warm,
            fallback_normals,
            inner_solves: Cell::new(0),
            inner_failures: Cell::new(0),
        })
    }

    /// Ballistic predictor plus centered cone variables.
    pub fn init(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim);
        let dt = self.state.dt;
        for i in 0..self.mech.bodies.len() {
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
        for lay in &self.layouts {
            for j in 0..lay.head() {
                v[lay.base_v + j] = 1.0;
            }
        }
        v
    }

    fn side_poses(&self, q_plus: &DVector<f64>, pair: &PairGeom) -> (Pose, Pose) {
        let body_pose = |i: usize| Pose::planar(q_plus[3 * i], q_plus[3 * i + 1], q_plus[3 * i + 2]);
        let pose_a = body_pose(pair.body_a).compose(&pair.member_a.offset);
        let pose_b = match pair.partner {
            Partner::Body(j) => body_pose(j).compose(&pair.member_b.offset),
            Partner::Env(_) => pair.member_b.offset.clone(),
        };
        (pose_a, pose_b)
    }

    /// One inner collision solve (warm started per pair).
    fn solve_inner(&self, pair_idx: usize, pose_a: &Pose, pose_b: &Pose) -> Result<CollisionResult> {
        let pair = &self.pairs[pair_idx];
        let problem =
            CollisionProblem::new(&pair.member_a.shape, pose_a, &pair.member_b.shape, pose_b)?;
        let init = {
            let warm = self.warm.borrow();
            match &warm[pair_idx] {
                Some(prev) => solver::warm_start(
                    prev,
                    &problem.cone_pairs(),
                    self.config.inner.warm_perturbation,
                ),
                None => problem.init(),
            }
        };
        self.inner_solves.set(self.inner_solves.get() + 1);
        let result = detect_from(&problem, &init, &self.config.inner)?;
        self.warm.borrow_mut()[pair_idx] = Some(result.v.clone());
        Ok(result)
    }

    /// Inner data for every pair at a configuration, cached on the exact bits
    /// of `q_plus`.
    fn inner_data(&self, q_plus: &DVector<f64>) -> Result<Vec<InnerData>> {
        let key: Vec<u64> = q_plus.iter().map(|x| x.to_bits()).collect();
        if let Some(hit) = self.cache.borrow().get(&key) {
            return Ok(hit.clone());
        }
        let mut list = Vec::with_capacity(self.pairs.len());
        for (idx, pair) in self.pairs.iter().enumerate() {
            let (pose_a, pose_b) = self.side_poses(q_plus, pair);
            let result = self.solve_inner(idx, &pose_a, &pose_b)?;
            if !result.converged() {
                self.inner_failures.set(self.inner_failures.get() + 1);
                return Err(Error::NotConverged("inner collision solve failed".into()));
            }
            let n = match self.config.normal_method {
                NormalMethod::ValueSensitivity => result.normal_b.clone(),
                NormalMethod::Ift => {
                    let problem = CollisionProblem::new(
                        &pair.member_a.shape,
                        &pose_a,
                        &pair.member_b.shape,
                        &pose_b,
                    )?;
                    // The IFT normal is d alpha / d x_a, the impulse direction
                    // on body a; rank deficiency propagates as inner failure.
                    match crate::collision::normal_ift(&problem, &result) {
                        Ok(n) => Some(n),
                        Err(e @ Error::RankDeficient(_)) => {
                            self.inner_failures.set(self.inner_failures.get() + 1);
                            return Err(e);
                        }
                        Err(_) => None,
                    }
                }
            };
            let (n, degenerate) = match n {
                Some(n) => {
                    let v = Vector2::new(n[0], n[1]);
                    *self.fallback_normals[idx].borrow_mut() = v;
                    (v, false)
                }
                None => (*self.fallback_normals[idx].borrow(), true),
            };
            list.push(InnerData {
                phi: result.phi,
                p: Vector2::new(result.p[0], result.p[1]),
                n,
                degenerate,
                v_inner: result.v.clone(),
            });
        }
        let mut cache = self.cache.borrow_mut();
        if cache.len() > 256 {
            cache.clear();
        }
        cache.insert(key, list.clone());
        Ok(list)
    }

    fn relative_velocity(
        &self,
        v: &DVector<f64>,
        pair: &PairGeom,
        p: &Vector2<f64>,
    ) -> Vector2<f64> {
        let dt = self.state.dt;
        let vel_of = |i: usize| -> Vector2<f64> {
            let xp = Vector2::new(v[3 * i], v[3 * i + 1]);
            let xc = Vector2::new(self.state.q[3 * i], self.state.q[3 * i + 1]);
            let omega = (v[3 * i + 2] - self.state.q[3 * i + 2]) / dt;
            (xp - xc) / dt + omega * perp(&(p - xp))
        };
        match pair.partner {
            Partner::Body(j) => vel_of(pair.body_a) - vel_of(j),
            Partner::Env(_) => vel_of(pair.body_a),
        }
    }

    fn residual_inner(&self, v: &DVector<f64>, rho: f64, out: &mut DVector<f64>) -> Result<()> {
        let q_plus = v.rows(0, self.nq).into_owned();
        let inner = self.inner_data(&q_plus)?;
        out.fill(0.0);
        out.rows_mut(0, self.nq)
            .copy_from(&free_dynamics_residual(&q_plus, self.state, self.mech));
        for (idx, lay) in self.layouts.iter().enumerate() {
            let data = &inner[idx];
            let pair = &self.pairs[idx];
            let gamma = v[lay.v_gamma()];
            let (beta1, beta2) = if lay.friction {
                (v[lay.v_beta()], v[lay.v_beta() + 1])
            } else {
                (0.0, 0.0)
            };
            let t = perp(&data.n);
            let force = gamma * data.n + (beta1 - beta2) * t;
            let ia = pair.body_a;
            let xa = Vector2::new(v[3 * ia], v[3 * ia + 1]);
            out[3 * ia] -= force.x;
            out[3 * ia + 1] -= force.y;
            out[3 * ia + 2] -= cross2(&(data.p - xa), &force);
            if let Partner::Body(j) = pair.partner {
                let xb = Vector2::new(v[3 * j], v[3 * j + 1]);
                out[3 * j] += force.x;
                out[3 * j + 1] += force.y;
                out[3 * j + 2] += cross2(&(data.p - xb), &force);
            }
            out[lay.r_sgamma()] = v[lay.v_sgamma()] - data.phi;
            out[lay.r_comp_gamma()] = gamma * v[lay.v_sgamma()] - rho;
            if lay.friction {
                let psi = v[lay.v_psi()];
                out[lay.r_spsi()] = v[lay.v_spsi()] - (self.mech.mu * gamma - beta1 - beta2);
                let vrel = self.relative_velocity(v, pair, &data.p);
                let tv = t.dot(&vrel);
                out[lay.r_sbeta()] = v[lay.v_sbeta()] - (tv + psi);
                out[lay.r_sbeta() + 1] = v[lay.v_sbeta() + 1] - (-tv + psi);
                out[lay.r_comp_psi()] = psi * v[lay.v_spsi()] - rho;
                out[lay.r_comp_beta()] = beta1 * v[lay.v_sbeta()] - rho;
                out[lay.r_comp_beta() + 1] = beta2 * v[lay.v_sbeta() + 1] - rho;
            }
        }
        Ok(())
    }

    /// Derivatives of the inner maps `(phi, p, n)` with respect to the
    /// configuration coordinates of the bodies attached to the pair.
    ///
    /// Returns per-coordinate columns indexed by the global q column.
    fn inner_map_derivatives(
        &self,
        q_plus: &DVector<f64>,
        pair_idx: usize,
        data: &InnerData,
    ) -> Result<Vec<(usize, f64, Vector2<f64>, Vector2<f64>)>> {
        let pair = &self.pairs[pair_idx];
        let (pose_a, pose_b) = self.side_poses(q_plus, pair);
        let problem =
            CollisionProblem::new(&pair.member_a.shape, &pose_a, &pair.member_b.shape, &pose_b)?;
        let lay = problem.layout;
        let mut coords: Vec<usize> = (0..3).map(|c| 3 * pair.body_a + c).collect();
        if let Partner::Body(j) = pair.partner {
            coords.extend((0..3).map(|c| 3 * j + c));
        }

        // Try the implicit-function route first.
        if let Some(result) = self.ift_map_derivatives(&problem, q_plus, pair_idx, data, &coords)? {
            return Ok(result);
        }

        // Finite-difference fallback on the inner solution map: the map is
        // discontinuous in face-to-face contact, which is exactly the
        // pathology this baseline exhibits.
        let h = self.config.fd_step;
        let mut out = Vec::with_capacity(coords.len());
        for &col in &coords {
            let mut plus = q_plus.clone();
            plus[col] += h;
            let mut minus = q_plus.clone();
            minus[col] -= h;
            let (pa_p, pb_p) = self.side_poses(&plus, pair);
            let rp = self.solve_inner(pair_idx, &pa_p, &pb_p)?;
            let (pa_m, pb_m) = self.side_poses(&minus, pair);
            let rm = self.solve_inner(pair_idx, &pa_m, &pb_m)?;
            if !rp.converged() || !rm.converged() {
                self.inner_failures.set(self.inner_failures.get() + 1);
                return Err(Error::NotConverged("inner solve failed in FD fallback".into()));
            }
            let dphi = (rp.phi - rm.phi) / (2.0 * h);
            let dp = Vector2::new(
                (rp.p[0] - rm.p[0]) / (2.0 * h),
                (rp.p[1] - rm.p[1]) / (2.0 * h),
            );
            let dn = match (&rp.normal_b, &rm.normal_b) {
                (Some(np), Some(nm)) => {
                    Vector2::new((np[0] - nm[0]) / (2.0 * h), (np[1] - nm[1]) / (2.0 * h))
                }
                _ => Vector2::zeros(),
            };
            out.push((col, dphi, dp, dn));
        }
        let _ = lay;
        Ok(out)
    }

    /// IFT derivatives of `(phi, p, n)`; `None` when the inner KKT Jacobian is
    /// rank deficient.
    #[allow(clippy::type_complexity)]
    fn ift_map_derivatives(
        &self,
        problem: &CollisionProblem<'_>,
        _q_plus: &DVector<f64>,
        pair_idx: usize,
        data: &InnerData,
        coords: &[usize],
    ) -> Result<Option<Vec<(usize, f64, Vector2<f64>, Vector2<f64>)>>> {
        let pair = &self.pairs[pair_idx];
        let l = problem.layout;
        let d = l.d;
        let jac = problem.kkt_jacobian(&data.v_inner)?;
        let svd = jac.clone().svd(false, false);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        if !(smin > smax * 1e-10) {
            return Ok(None);
        }
        let Some(lu) = LuSolver::new(jac) else { return Ok(None) };

        // Unpack the inner solution.
        let p_sol = data.v_inner.rows(l.idx_p(), d).into_owned();
        let alpha = data.v_inner[l.idx_alpha()];
        let eps_a = data.v_inner.rows(l.idx_eps_a(), l.ka).into_owned();
        let eps_b = data.v_inner.rows(l.idx_eps_b(), l.kb).into_owned();
        let lam_a = data.v_inner.rows(l.idx_lambda(), l.ma).into_owned();
        let lam_b = data.v_inner.rows(l.idx_lambda() + l.ma, l.mb).into_owned();
        let fa = eval_at_pose(&pair.member_a.shape, problem.pose_a, &p_sol, alpha, &eps_a)?;
        let fb = eval_at_pose(&pair.member_b.shape, problem.pose_b, &p_sol, alpha, &eps_b)?;
        let ha = body_hessian(&pair.member_a.shape, &fa.w, alpha, &eps_a, &lam_a)?;
        let hb = body_hessian(&pair.member_b.shape, &fb.w, alpha, &eps_b, &lam_b)?;

        // Chain vectors from member offsets to body orientations.
        let body_pose_a = Pose::planar(
            _q_plus[3 * pair.body_a],
            _q_plus[3 * pair.body_a + 1],
            _q_plus[3 * pair.body_a + 2],
        );
        let cvec_a = body_pose_a.rotation_dtheta() * &pair.member_a.offset.x;
        let cvec_b = match pair.partner {
            Partner::Body(j) => {
                let bp = Pose::planar(_q_plus[3 * j], _q_plus[3 * j + 1], _q_plus[3 * j + 2]);
                bp.rotation_dtheta() * &pair.member_b.offset.x
            }
            Partner::Env(_) => DVector::zeros(d),
        };

        // Build dr/dcoord for each involved coordinate.
        // For a side, translation columns are the negated p-columns of that
        // side's rows; the rotation column uses the dw/dtheta chain.
        let side_cols = |f: &crate::geometry::FrameEval,
                         h: &DMatrix<f64>,
                         lam: &DVector<f64>,
                         is_a: bool|
         -> DMatrix<f64> {
            let (m, k, row_eps, block) = if is_a {
                (l.ma, l.ka, l.row_stat_eps_a(), 0)
            } else {
                (l.mb, l.kb, l.row_stat_eps_b(), l.ma)
            };
            let rt = f.rot.transpose();
            let mut cols = DMatrix::zeros(l.dim(), 3);
            // x columns (2): -d/dp restricted to this side's rows.
            let da_dp = (h.view((0, d), (d, 1)).transpose() * &rt).into_owned();
            let dp_dp = (&f.rot * h.view((0, 0), (d, d)) * &rt).into_owned();
            let gp = f.g_p();
            for c in 0..d {
                cols[(l.row_stat_alpha(), c)] = -da_dp[(0, c)];
                for i in 0..d {
                    cols[(l.row_stat_p() + i, c)] = -dp_dp[(i, c)];
                }
                if k > 0 {
                    let de_dp = (h.view((d + 1, 0), (k, d)) * &rt).into_owned();
                    for i in 0..k {
                        cols[(row_eps + i, c)] = -de_dp[(i, c)];
                    }
                }
                for i in 0..m {
                    cols[(l.row_feas() + block + i, c)] = -gp[(i, c)];
                }
            }
            // theta column: d/dtheta_member plus translation chain.
            let cvec = if is_a { &cvec_a } else { &cvec_b };
            let da_dth = (h.view((d, 0), (1, d)) * &f.dw_dtheta)[(0, 0)];
            cols[(l.row_stat_alpha(), 2)] =
                da_dth - (da_dp[(0, 0)] * cvec[0] + da_dp[(0, 1)] * cvec[1]);
            let dp_dth = &f.drot * f.gw_t_lambda(lam)
                + &f.rot * (h.view((0, 0), (d, d)) * &f.dw_dtheta);
            for i in 0..d {
                cols[(l.row_stat_p() + i, 2)] =
                    dp_dth[i] - (dp_dp[(i, 0)] * cvec[0] + dp_dp[(i, 1)] * cvec[1]);
            }
            if k > 0 {
                let de_dp = (h.view((d + 1, 0), (k, d)) * &rt).into_owned();
                let de_dth = h.view((d + 1, 0), (k, d)) * &f.dw_dtheta;
                for i in 0..k {
                    cols[(row_eps + i, 2)] =
                        de_dth[i] - (de_dp[(i, 0)] * cvec[0] + de_dp[(i, 1)] * cvec[1]);
                }
            }
            let gth = f.g_theta();
            for i in 0..m {
                cols[(l.row_feas() + block + i, 2)] =
                    gth[i] - (gp[(i, 0)] * cvec[0] + gp[(i, 1)] * cvec[1]);
            }
            cols
        };

        let cols_a = side_cols(&fa, &ha, &lam_a, true);
        let cols_b = match pair.partner {
            Partner::Body(_) => Some(side_cols(&fb, &hb, &lam_b, false)),
            Partner::Env(_) => None,
        };

        // Normal sensitivity pieces at the solution (side b drives n).
        let nv = DVector::from_vec(vec![data.n.x, data.n.y]);
        let u = fb.dual_gradient(&lam_b);
        let unorm = u.norm();
        let proj = if data.degenerate || unorm < crate::geometry::DEGENERATE_NORMAL_TOL {
            DMatrix::zeros(d, d)
        } else {
            (DMatrix::identity(d, d) - &nv * nv.transpose()) / unorm
        };
        let rt_b = fb.rot.transpose();
        let hb_ww = hb.view((0, 0), (d, d)).into_owned();
        let du_dp = &fb.rot * &hb_ww * &rt_b;
        let du_dalpha = &fb.rot * hb.view((0, d), (d, 1)).into_owned();
        let du_deps = &fb.rot * hb.view((0, d + 1), (d, l.kb)).into_owned();
        let du_dlam = fb.g_p().transpose();
        let du_dth = &fb.drot * fb.gw_t_lambda(&lam_b) + &fb.rot * (&hb_ww * &fb.dw_dtheta);

        let mut out = Vec::with_capacity(coords.len());
        for (local, &col) in coords.iter().enumerate() {
            let is_a_side = local < 3;
            let c = local % 3;
            let dr = if is_a_side {
                cols_a.column(c).into_owned()
            } else {
                cols_b.as_ref().expect("body partner").column(c).into_owned()
            };
            let dy = lu
                .solve(&(-dr))
                .ok_or_else(|| Error::RankDeficient("inner IFT solve".into()))?;
            let dphi = dy[l.idx_alpha()];
            let dp = Vector2::new(dy[l.idx_p()], dy[l.idx_p() + 1]);
            // n = normalize(u): chain through the inner solution plus the
            // explicit pose dependence of side b.
            let dp_vec = DVector::from_vec(vec![dp.x, dp.y]);
            let mut du = &du_dp * dp_vec + &du_dalpha * dy[l.idx_alpha()];
            if l.kb > 0 {
                du += &du_deps * dy.rows(l.idx_eps_b(), l.kb).into_owned();
            }
            du += &du_dlam * dy.rows(l.idx_lambda() + l.ma, l.mb).into_owned();
            if !is_a_side {
                // Explicit dependence on side b's own pose coordinate.
                match c {
                    0 | 1 => {
                        du -= du_dp.column(c).into_owned();
                    }
                    _ => {
                        let chain = &du_dp * DVector::from_vec(vec![cvec_b[0], cvec_b[1]]);
                        du += &du_dth - chain;
                    }
                }
            }
            let dn_vec = &proj * du;
            let dn = Vector2::new(dn_vec[0], dn_vec[1]);
            out.push((col, dphi, dp, dn));
        }
        Ok(Some(out))
    }

    fn jacobian_inner(&self, v: &DVector<f64>, out: &mut DMatrix<f64>) -> Result<()> {
        let q_plus = v.rows(0, self.nq).into_owned();
        let inner = self.inner_data(&q_plus)?;
        out.fill(0.0);
        let dt = self.state.dt;
        for (i, body) in self.mech.bodies.iter().enumerate() {
            let o = 3 * i;
            out[(o, o)] = body.mass / dt;
            out[(o + 1, o + 1)] = body.mass / dt;
            out[(o + 2, o + 2)] = body.inertia / dt;
        }
        let perp90 = Matrix2::new(0.0, -1.0, 1.0, 0.0);

        for (idx, lay) in self.layouts.iter().enumerate() {
            let pair = &self.pairs[idx];
            let data = &inner[idx];
            let gamma = v[lay.v_gamma()];
            let (beta1, beta2) = if lay.friction {
                (v[lay.v_beta()], v[lay.v_beta() + 1])
            } else {
                (0.0, 0.0)
            };
            let n = data.n;
            let t = perp(&n);
            let force = gamma * n + (beta1 - beta2) * t;
            let ia = pair.body_a;
            let partner_body = match pair.partner {
                Partner::Body(j) => Some(j),
                Partner::Env(_) => None,
            };
            let arms: Vec<(usize, f64, Vector2<f64>)> = {
                let mut list =
                    vec![(ia, 1.0, data.p - Vector2::new(v[3 * ia], v[3 * ia + 1]))];
                if let Some(j) = partner_body {
                    list.push((j, -1.0, data.p - Vector2::new(v[3 * j], v[3 * j + 1])));
                }
                list
            };

            // Contact-variable columns.
            for (body, sign, arm) in &arms {
                out[(3 * body, lay.v_gamma())] -= sign * n.x;
                out[(3 * body + 1, lay.v_gamma())] -= sign * n.y;
                out[(3 * body + 2, lay.v_gamma())] -= sign * cross2(arm, &n);
                if lay.friction {
                    for (k, bsign) in [(0usize, 1.0f64), (1, -1.0)] {
                        out[(3 * body, lay.v_beta() + k)] -= sign * bsign * t.x;
                        out[(3 * body + 1, lay.v_beta() + k)] -= sign * bsign * t.y;
                        out[(3 * body + 2, lay.v_beta() + k)] -= sign * bsign * cross2(arm, &t);
                    }
                }
                // Arm dependence on own body translation.
                out[(3 * body + 2, 3 * body)] += sign * force.y;
                out[(3 * body + 2, 3 * body + 1)] -= sign * force.x;
            }

            out[(lay.r_sgamma(), lay.v_sgamma())] = 1.0;
            out[(lay.r_comp_gamma(), lay.v_gamma())] = v[lay.v_sgamma()];
            out[(lay.r_comp_gamma(), lay.v_sgamma())] = gamma;
            if lay.friction {
                let psi = v[lay.v_psi()];
                out[(lay.r_spsi(), lay.v_spsi())] = 1.0;
                out[(lay.r_spsi(), lay.v_gamma())] = -self.mech.mu;
                out[(lay.r_spsi(), lay.v_beta())] = 1.0;
                out[(lay.r_spsi(), lay.v_beta() + 1)] = 1.0;
                for (k, sign) in [(0usize, 1.0f64), (1, -1.0)] {
                    let row = lay.r_sbeta() + k;
                    out[(row, lay.v_sbeta() + k)] = 1.0;
                    out[(row, lay.v_psi())] = -1.0;
                    // Explicit q dependence of v_rel at fixed p, n.
                    let vel_cols = |body: usize, body_sign: f64, out: &mut DMatrix<f64>| {
                        let xp = Vector2::new(v[3 * body], v[3 * body + 1]);
                        let omega = (v[3 * body + 2] - self.state.q[3 * body + 2]) / dt;
                        let dv_dx = body_sign * (Matrix2::identity() / dt - omega * perp90);
                        let tv = t.transpose() * dv_dx;
                        out[(row, 3 * body)] += -sign * tv[(0, 0)];
                        out[(row, 3 * body + 1)] += -sign * tv[(0, 1)];
                        let dv_dth = body_sign * perp(&(data.p - xp)) / dt;
                        out[(row, 3 * body + 2)] += -sign * t.dot(&dv_dth);
                    };
                    vel_cols(ia, 1.0, out);
                    if let Some(j) = partner_body {
                        vel_cols(j, -1.0, out);
                    }
                }
                out[(lay.r_comp_psi(), lay.v_psi())] = v[lay.v_spsi()];
                out[(lay.r_comp_psi(), lay.v_spsi())] = psi;
                for k in 0..2 {
                    out[(lay.r_comp_beta() + k, lay.v_beta() + k)] = v[lay.v_sbeta() + k];
                    out[(lay.r_comp_beta() + k, lay.v_sbeta() + k)] = v[lay.v_beta() + k];
                }
            }

            // Configuration columns through the inner maps (phi, p, n).
            let derivs = self.inner_map_derivatives(&q_plus, idx, data)?;
            for (col, dphi, dp, dn) in derivs {
                // Non-penetration row.
                out[(lay.r_sgamma(), col)] += -dphi;
                // Force direction change.
                let dt_vec = perp90 * dn;
                let dforce = gamma * dn + (beta1 - beta2) * dt_vec;
                for (body, sign, arm) in &arms {
                    out[(3 * body, col)] -= sign * dforce.x;
                    out[(3 * body + 1, col)] -= sign * dforce.y;
                    out[(3 * body + 2, col)] -=
                        sign * (cross2(&dp, &force) + cross2(arm, &dforce));
                }
                if lay.friction {
                    let vrel = self.relative_velocity(v, pair, &data.p);
                    for (k, sign) in [(0usize, 1.0f64), (1, -1.0)] {
                        let row = lay.r_sbeta() + k;
                        // t^T v_rel changes through t and through p.
                        let mut dval = dt_vec.dot(&vrel);
                        let mut dv_dp_total = Matrix2::zeros();
                        let omega_a =
                            (v[3 * ia + 2] - self.state.q[3 * ia + 2]) / dt;
                        dv_dp_total += omega_a * perp90;
                        if let Some(j) = partner_body {
                            let omega_b = (v[3 * j + 2] - self.state.q[3 * j + 2]) / dt;
                            dv_dp_total -= omega_b * perp90;
                        }
                        dval += t.dot(&(dv_dp_total * dp));
                        out[(row, col)] += -sign * dval;
                    }
                }
            }
        }
        Ok(())
    }
}

impl NcpProblem for BilevelProblem<'_> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn cone_pairs(&self) -> Vec<ConePair> {
        let mut pairs = Vec::new();
        for lay in &self.layouts {
            pairs.push(ConePair { a: lay.v_gamma(), b: lay.v_sgamma(), row: lay.r_comp_gamma() });
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

/// Outcome of one bilevel step.
pub struct BilevelReport {
    pub report: SolveReport,
    pub inner_solves: usize,
    pub inner_failures: usize,
}

/// Advance one step with the bilevel formulation.
///
/// `warm` may carry the previous step's outer solution; cone variables are
/// perturbed into the interior exactly as in the single-level path.
pub fn bilevel_step(
    mech: &Mechanism,
    state: &MechanismState,
    config: &BilevelConfig,
    warm: Option<&DVector<f64>>,
) -> Result<BilevelReport> {
    let problem = BilevelProblem::new(mech, state, config.clone())?;
    let init = match warm {
        Some(prev) => solver::warm_start(
            prev,
            &problem.cone_pairs(),
            config.outer.warm_perturbation,
        ),
        None => problem.init(),
    };
    let report = solver::solve(&problem, &init, &config.outer);
    Ok(BilevelReport {
        report,
        inner_solves: problem.inner_solves.get(),
        inner_failures: problem.inner_failures.get(),
    })
}
