//! Body-frame constraint evaluation with analytic first and second derivatives.
//!
//! Evaluation works on the stacked variable `z = [w, alpha, eps]` where `w` is
//! the body-frame query point. [`body_eval`] returns the constraint values and
//! the full gradient `dg/dz`; [`body_hessian`] returns the Hessian of the
//! dual-weighted sum `lambda^T g` over `z`, which is what the KKT Jacobians
//! need. Minkowski composites recurse through both with exact linear chain
//! maps, so composites stay exactly as differentiable as their parts.

use super::{ConvexShape, ShapePrimitive};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Norm below which direction-dependent rows (capsule axis distance, cone
/// lateral distance) are considered nondifferentiable.
const SINGULAR_NORM: f64 = 1e-12;

/// Constraint values and gradient in body-frame variables.
#[derive(Debug)]
pub struct BodyEval {
    /// Stacked constraint values, `m` rows.
    pub g: DVector<f64>,
    /// `m x (d + 1 + k)` gradient over `z = [w, alpha, eps]`.
    pub grad: DMatrix<f64>,
}

fn check_dims(shape: &ConvexShape, w: &DVector<f64>, eps: &DVector<f64>) -> Result<()> {
    if w.len() != shape.dim() {
        return Err(Error::config(format!(
            "point dimension {} does not match shape dimension {}",
            w.len(),
            shape.dim()
        )));
    }
    if eps.len() != shape.aux_dim() {
        return Err(Error::config(format!(
            "auxiliary dimension {} does not match shape auxiliary dimension {}",
            eps.len(),
            shape.aux_dim()
        )));
    }
    Ok(())
}

/// Evaluate `g` and `dg/dz` at a body-frame point.
pub fn body_eval(
    shape: &ConvexShape,
    w: &DVector<f64>,
    alpha: f64,
    eps: &DVector<f64>,
) -> Result<BodyEval> {
    check_dims(shape, w, eps)?;
    match shape {
        ConvexShape::Primitive(p) => primitive_eval(p, w, alpha, eps),
        ConvexShape::MinkowskiSum { left, right } => {
            let d = shape.dim();
            let (ml, mr) = (left.shape.constraint_dim(), right.shape.constraint_dim());
            let (kl, kr) = (left.shape.aux_dim(), right.shape.aux_dim());
            let map_l = child_map(d, kl, kr, true, &left.offset);
            let map_r = child_map(d, kl, kr, false, &right.offset);
            let z = stack_z(w, alpha, eps);
            let el = body_eval(&left.shape, &split_w(&map_l, &z, d), alpha, &eps.rows(0, kl).into_owned())?;
            let er = body_eval(&right.shape, &split_w(&map_r, &z, d), alpha, &eps.rows(kl, kr).into_owned())?;
            let mut g = DVector::zeros(ml + mr);
            g.rows_mut(0, ml).copy_from(&el.g);
            g.rows_mut(ml, mr).copy_from(&er.g);
            let mut grad = DMatrix::zeros(ml + mr, z.len());
            grad.rows_mut(0, ml).copy_from(&(&el.grad * &map_l));
            grad.rows_mut(ml, mr).copy_from(&(&er.grad * &map_r));
            Ok(BodyEval { g, grad })
        }
    }
}

/// Hessian of `lambda^T g` over `z = [w, alpha, eps]` at a body-frame point.
pub fn body_hessian(
    shape: &ConvexShape,
    w: &DVector<f64>,
    alpha: f64,
    eps: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    check_dims(shape, w, eps)?;
    if lambda.len() != shape.constraint_dim() {
        return Err(Error::config("dual dimension mismatch"));
    }
    match shape {
        ConvexShape::Primitive(p) => primitive_hessian(p, w, alpha, eps, lambda),
        ConvexShape::MinkowskiSum { left, right } => {
            let d = shape.dim();
            let (ml, _mr) = (left.shape.constraint_dim(), right.shape.constraint_dim());
            let (kl, kr) = (left.shape.aux_dim(), right.shape.aux_dim());
            let map_l = child_map(d, kl, kr, true, &left.offset);
            let map_r = child_map(d, kl, kr, false, &right.offset);
            let z = stack_z(w, alpha, eps);
            let hl = body_hessian(
                &left.shape,
                &split_w(&map_l, &z, d),
                alpha,
                &eps.rows(0, kl).into_owned(),
                &lambda.rows(0, ml).into_owned(),
            )?;
            let hr = body_hessian(
                &right.shape,
                &split_w(&map_r, &z, d),
                alpha,
                &eps.rows(kl, kr).into_owned(),
                &lambda.rows(ml, lambda.len() - ml).into_owned(),
            )?;
            Ok(map_l.transpose() * hl * &map_l + map_r.transpose() * hr * &map_r)
        }
    }
}

fn stack_z(w: &DVector<f64>, alpha: f64, eps: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(w.len() + 1 + eps.len());
    z.rows_mut(0, w.len()).copy_from(w);
    z[w.len()] = alpha;
    z.rows_mut(w.len() + 1, eps.len()).copy_from(eps);
    z
}

/// Linear map from composite variables `z_c = [w, alpha, eps_l, eps_r, split]`
/// to one child's variables `z_child = [w_child, alpha, eps_child]`.
///
/// The left child is evaluated at the split point, the right child at the
/// remainder `w - split`; offset translations scale with `alpha` so the
/// composite scales exactly about the parent origin.
fn child_map(d: usize, kl: usize, kr: usize, is_left: bool, offset: &super::Pose) -> DMatrix<f64> {
    let k_child = if is_left { kl } else { kr };
    let n_c = d + 1 + kl + kr + d;
    let rot_t = offset.rotation().transpose();
    let mut map = DMatrix::zeros(d + 1 + k_child, n_c);
    let split_col = d + 1 + kl + kr;
    // w_child = R_off^T ((. ) - alpha * t_off)
    if is_left {
        map.view_mut((0, split_col), (d, d)).copy_from(&rot_t);
    } else {
        map.view_mut((0, 0), (d, d)).copy_from(&rot_t);
        map.view_mut((0, split_col), (d, d)).copy_from(&(-&rot_t));
    }
    let shift = -(&rot_t * &offset.x);
    map.view_mut((0, d), (d, 1)).copy_from(&shift);
    // alpha passes through.
    map[(d, d)] = 1.0;
    // eps_child block.
    let eps_src = if is_left { d + 1 } else { d + 1 + kl };
    for i in 0..k_child {
        map[(d + 1 + i, eps_src + i)] = 1.0;
    }
    map
}

fn split_w(map: &DMatrix<f64>, z: &DVector<f64>, d: usize) -> DVector<f64> {
    (map * z).rows(0, d).into_owned()
}

fn primitive_eval(
    p: &ShapePrimitive,
    w: &DVector<f64>,
    alpha: f64,
    eps: &DVector<f64>,
) -> Result<BodyEval> {
    let d = p.dim();
    let m = p.constraint_dim();
    let k = p.aux_dim();
    let n = d + 1 + k;
    let mut g = DVector::zeros(m);
    let mut grad = DMatrix::zeros(m, n);
    match p {
        ShapePrimitive::HalfSpace { a, b } => {
            g[0] = a.dot(w) - b;
            grad.view_mut((0, 0), (1, d)).copy_from(&a.transpose());
        }
        ShapePrimitive::Polytope { a, b } => {
            g.copy_from(&(a * w - alpha * b));
            grad.view_mut((0, 0), (m, d)).copy_from(a);
            grad.view_mut((0, d), (m, 1)).copy_from(&(-b));
        }
        ShapePrimitive::PaddedPolytope { a, b, radius } => {
            let rows = a.nrows();
            g.rows_mut(0, rows).copy_from(&(a * (w + eps) - alpha * b));
            g[rows] = eps.dot(eps) - alpha * alpha * radius * radius;
            grad.view_mut((0, 0), (rows, d)).copy_from(a);
            grad.view_mut((0, d), (rows, 1)).copy_from(&(-b));
            grad.view_mut((0, d + 1), (rows, k)).copy_from(a);
            grad[(rows, d)] = -2.0 * alpha * radius * radius;
            grad.view_mut((rows, d + 1), (1, k))
                .copy_from(&(2.0 * eps.transpose()));
        }
        ShapePrimitive::Ellipsoid { e } => {
            let q = e.transpose() * e;
            let qw = &q * w;
            g[0] = w.dot(&qw) - alpha * alpha;
            grad.view_mut((0, 0), (1, d)).copy_from(&(2.0 * qw.transpose()));
            grad[(0, d)] = -2.0 * alpha;
        }
        ShapePrimitive::Capsule { radius, length, axis }
        | ShapePrimitive::Cylinder { radius, length, axis } => {
            let epsv = eps[0];
            let u = w - epsv * axis;
            let nu = u.norm();
            if nu < SINGULAR_NORM {
                return Err(Error::Singularity(
                    "query point on capsule/cylinder axis point".into(),
                ));
            }
            let uhat = u / nu;
            g[0] = nu - alpha * radius;
            g[1] = epsv - alpha * length / 2.0;
            g[2] = -epsv - alpha * length / 2.0;
            grad.view_mut((0, 0), (1, d)).copy_from(&uhat.transpose());
            grad[(0, d)] = -radius;
            grad[(0, d + 1)] = -uhat.dot(axis);
            grad[(1, d)] = -length / 2.0;
            grad[(1, d + 1)] = 1.0;
            grad[(2, d)] = -length / 2.0;
            grad[(2, d + 1)] = -1.0;
            if let ShapePrimitive::Cylinder { .. } = p {
                g[3] = -axis.dot(w) - alpha * length / 2.0;
                g[4] = axis.dot(w) - alpha * length / 2.0;
                grad.view_mut((3, 0), (1, d)).copy_from(&(-axis.transpose()));
                grad[(3, d)] = -length / 2.0;
                grad.view_mut((4, 0), (1, d)).copy_from(&axis.transpose());
                grad[(4, d)] = -length / 2.0;
            }
        }
        ShapePrimitive::Cone { half_angle, height, axis } => {
            let t = half_angle.tan();
            let c = 3.0 * height / 4.0;
            let phat = w + alpha * c * axis;
            let axial = axis.dot(&phat);
            let perp = &phat - axial * axis;
            let np = perp.norm();
            if np < SINGULAR_NORM {
                return Err(Error::Singularity("query point on cone axis".into()));
            }
            let mhat = perp / np;
            g[0] = np - t * axial;
            g[1] = axis.dot(w) - alpha * height / 4.0;
            // d(g0)/dw = mhat - tan * axis ; d(g0)/dalpha = -tan * c.
            grad.view_mut((0, 0), (1, d))
                .copy_from(&(&mhat - t * axis).transpose());
            grad[(0, d)] = -t * c;
            grad.view_mut((1, 0), (1, d)).copy_from(&axis.transpose());
            grad[(1, d)] = -height / 4.0;
        }
    }
    Ok(BodyEval { g, grad })
}

fn primitive_hessian(
    p: &ShapePrimitive,
    w: &DVector<f64>,
    alpha: f64,
    eps: &DVector<f64>,
    lambda: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let d = p.dim();
    let k = p.aux_dim();
    let n = d + 1 + k;
    let mut h = DMatrix::zeros(n, n);
    match p {
        ShapePrimitive::HalfSpace { .. } | ShapePrimitive::Polytope { .. } => {}
        ShapePrimitive::PaddedPolytope { a, radius, .. } => {
            let lam = lambda[a.nrows()];
            h[(d, d)] = -2.0 * radius * radius * lam;
            for i in 0..k {
                h[(d + 1 + i, d + 1 + i)] = 2.0 * lam;
            }
        }
        ShapePrimitive::Ellipsoid { e } => {
            let q = e.transpose() * e;
            h.view_mut((0, 0), (d, d)).copy_from(&(2.0 * lambda[0] * q));
            h[(d, d)] = -2.0 * lambda[0];
        }
        ShapePrimitive::Capsule { axis, .. } | ShapePrimitive::Cylinder { axis, .. } => {
            let epsv = eps[0];
            let u = w - epsv * axis;
            let nu = u.norm();
            if nu < SINGULAR_NORM {
                return Err(Error::Singularity(
                    "query point on capsule/cylinder axis point".into(),
                ));
            }
            let uhat = u / nu;
            // Hessian of ||w - eps v|| over (w, eps).
            let proj = (DMatrix::identity(d, d) - &uhat * uhat.transpose()) / nu;
            let pv = &proj * axis;
            let lam = lambda[0];
            h.view_mut((0, 0), (d, d)).copy_from(&(lam * &proj));
            h.view_mut((0, d + 1), (d, 1)).copy_from(&(-lam * &pv));
            h.view_mut((d + 1, 0), (1, d)).copy_from(&(-lam * pv.transpose()));
            h[(d + 1, d + 1)] = lam * axis.dot(&pv);
        }
        ShapePrimitive::Cone { height, axis, .. } => {
            let c = 3.0 * height / 4.0;
            let phat = w + alpha * c * axis;
            let axial = axis.dot(&phat);
            let perp = &phat - axial * axis;
            let np = perp.norm();
            if np < SINGULAR_NORM {
                return Err(Error::Singularity("query point on cone axis".into()));
            }
            let mhat = perp / np;
            // Hessian of ||(I - vv^T) phat|| over phat; the alpha direction
            // c*v lies in its null space, so only the w-block survives.
            let proj_v = DMatrix::identity(d, d) - axis * axis.transpose();
            let kmat = (proj_v - &mhat * mhat.transpose()) / np;
            h.view_mut((0, 0), (d, d)).copy_from(&(lambda[0] * kmat));
        }
    }
    Ok(h)
}
