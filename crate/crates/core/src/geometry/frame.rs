//! World-frame constraint evaluation at a pose.
//!
//! Wraps the body-frame machinery of [`super::eval`] with the rotation chain
//! rules. With `w = R(theta)^T (p - x)` every world derivative is a linear
//! image of the body-frame gradient and Hessian, so the KKT assembly in the
//! collision and dynamics modules only needs the blocks exposed here.

use super::{body_eval, body_hessian, ConvexShape, Pose};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Threshold below which a dual-weighted gradient is considered to carry no
/// usable normal direction.
pub const DEGENERATE_NORMAL_TOL: f64 = 1e-10;

/// A shape constraint evaluated at a world point for a given pose.
pub struct FrameEval {
    pub dim: usize,
    pub rows: usize,
    pub aux: usize,
    /// Body-frame query point `R^T (p - x)`.
    pub w: DVector<f64>,
    /// Constraint values.
    pub g: DVector<f64>,
    /// Body-frame gradient `dg/d[w, alpha, eps]`.
    pub grad_body: DMatrix<f64>,
    /// Rotation (body to world) and its angle derivative.
    pub rot: DMatrix<f64>,
    pub drot: DMatrix<f64>,
    /// `d w / d theta = (dR/dtheta)^T (p - x)`.
    pub dw_dtheta: DVector<f64>,
}

/// Evaluate a shape at world point `p` with scaling `alpha` and auxiliaries
/// `eps`, for the shape posed at `pose`.
pub fn eval_at_pose(
    shape: &ConvexShape,
    pose: &Pose,
    p: &DVector<f64>,
    alpha: f64,
    eps: &DVector<f64>,
) -> Result<FrameEval> {
    pose.validate()?;
    if pose.dim() != shape.dim() {
        return Err(Error::config("pose dimension does not match shape"));
    }
    let rot = pose.rotation();
    let drot = pose.rotation_dtheta();
    let rel = p - &pose.x;
    let w = rot.transpose() * &rel;
    let dw_dtheta = drot.transpose() * &rel;
    let body = body_eval(shape, &w, alpha, eps)?;
    Ok(FrameEval {
        dim: shape.dim(),
        rows: shape.constraint_dim(),
        aux: shape.aux_dim(),
        w,
        g: body.g,
        grad_body: body.grad,
        rot,
        drot,
        dw_dtheta,
    })
}

impl FrameEval {
    fn gw(&self) -> nalgebra::DMatrixView<'_, f64> {
        self.grad_body.view((0, 0), (self.rows, self.dim))
    }

    /// `dg/dp`, world frame.
    pub fn g_p(&self) -> DMatrix<f64> {
        self.gw() * self.rot.transpose()
    }

    /// `dg/dalpha`.
    pub fn g_alpha(&self) -> DVector<f64> {
        self.grad_body.column(self.dim).into_owned()
    }

    /// `dg/deps`.
    pub fn g_eps(&self) -> DMatrix<f64> {
        self.grad_body
            .view((0, self.dim + 1), (self.rows, self.aux))
            .into_owned()
    }

    /// `dg/dx` for the pose translation; equals `-dg/dp` exactly.
    pub fn g_x(&self) -> DMatrix<f64> {
        -self.g_p()
    }

    /// `dg/dtheta` for the pose orientation.
    pub fn g_theta(&self) -> DVector<f64> {
        self.gw() * &self.dw_dtheta
    }

    /// Dual-weighted gradient `(dg/dp)^T lambda`, the outward-normal direction
    /// of the shape at the active constraint face.
    pub fn dual_gradient(&self, lambda: &DVector<f64>) -> DVector<f64> {
        &self.rot * (self.gw().transpose() * lambda)
    }

    /// Body-frame dual-weighted gradient `G_w^T lambda`.
    pub fn gw_t_lambda(&self, lambda: &DVector<f64>) -> DVector<f64> {
        self.gw().transpose() * lambda
    }

    /// Dual-weighted stationarity over auxiliaries, `(dg/deps)^T lambda`.
    pub fn dual_eps(&self, lambda: &DVector<f64>) -> DVector<f64> {
        self.g_eps().transpose() * lambda
    }

    /// Dual-weighted stationarity over scaling, `(dg/dalpha)^T lambda`.
    pub fn dual_alpha(&self, lambda: &DVector<f64>) -> f64 {
        self.g_alpha().dot(lambda)
    }
}

/// Spec-facing bundle of all first-order constraint Jacobians at a point.
pub struct ConstraintJacobians {
    pub g: DVector<f64>,
    pub g_p: DMatrix<f64>,
    pub g_alpha: DVector<f64>,
    pub g_eps: DMatrix<f64>,
    pub g_x: DMatrix<f64>,
    pub g_theta: DVector<f64>,
}

impl ConstraintJacobians {
    pub fn from_eval(eval: &FrameEval) -> Self {
        ConstraintJacobians {
            g: eval.g.clone(),
            g_p: eval.g_p(),
            g_alpha: eval.g_alpha(),
            g_eps: eval.g_eps(),
            g_x: eval.g_x(),
            g_theta: eval.g_theta(),
        }
    }
}

/// Unit outward normal of a shape from its dual variables,
/// `n = (dg/dp)^T lambda / ||.||`.
///
/// The returned direction points out of the shape across the active face; the
/// direction along which moving the shape increases the collision scaling is
/// `-n` (translation enters as `p - x`).
pub fn contact_normal(eval: &FrameEval, lambda: &DVector<f64>) -> Result<DVector<f64>> {
    if lambda.len() != eval.rows {
        return Err(Error::config("dual dimension mismatch"));
    }
    let u = eval.dual_gradient(lambda);
    let norm = u.norm();
    if norm < DEGENERATE_NORMAL_TOL {
        return Err(Error::DegenerateNormal { norm });
    }
    Ok(u / norm)
}

/// Hessian of `lambda^T g` in body-frame variables at a [`FrameEval`] point.
pub fn frame_hessian(
    shape: &ConvexShape,
    eval: &FrameEval,
    alpha: f64,
    eps: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    body_hessian(shape, &eval.w, alpha, eps, lambda)
}
