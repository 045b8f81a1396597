//! Convex shape primitives as smooth inequality constraints.
//!
//! Every shape is a set `{p : g(p, alpha, eps; pose) <= 0}` where `alpha >= 0`
//! uniformly scales the shape about its pose origin and `eps` is an auxiliary
//! variable needed by swept shapes (capsules, cylinders, padded polytopes).
//! The constraint is evaluated in the body frame, `w = R(theta)^T (p - x)`, so
//! orientation enters every variant the same way.
//!
//! Conventions used throughout the crate:
//!
//! - `g <= 0` with `alpha = 1` iff `p` lies inside the unscaled shape.
//! - For fixed orientation, translation only enters through `p - x`, so
//!   `grad_x g = -grad_p g` exactly.
//! - The dual-weighted gradient `(grad_p g)^T lambda` points along the shape's
//!   outward normal at the active face; see [`contact_normal`].

mod eval;
mod frame;

pub use eval::{body_eval, body_hessian, BodyEval};
pub use frame::{
    contact_normal, eval_at_pose, frame_hessian, ConstraintJacobians, FrameEval,
    DEGENERATE_NORMAL_TOL,
};

use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// Rigid-body pose: translation plus a scalar orientation.
///
/// For `d = 2` the orientation is the usual planar angle and
/// `rotation()` maps body-frame vectors to the world frame. For `d = 3`
/// only the identity orientation is supported (collision tests only; 3D
/// rotational dynamics is out of scope).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub x: DVector<f64>,
    pub theta: f64,
}

impl Pose {
    pub fn new(x: DVector<f64>, theta: f64) -> Self {
        Pose { x, theta }
    }

    pub fn identity(dim: usize) -> Self {
        Pose { x: DVector::zeros(dim), theta: 0.0 }
    }

    pub fn planar(x: f64, y: f64, theta: f64) -> Self {
        Pose { x: DVector::from_vec(vec![x, y]), theta }
    }

    pub fn dim(&self) -> usize {
        self.x.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.theta.is_finite() || self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("pose has non-finite entries"));
        }
        if self.dim() == 3 && self.theta != 0.0 {
            return Err(Error::config(
                "3D shapes only support identity orientation",
            ));
        }
        Ok(())
    }

    /// Rotation matrix mapping body-frame vectors into the world frame.
    pub fn rotation(&self) -> DMatrix<f64> {
        match self.dim() {
            2 => {
                let (s, c) = self.theta.sin_cos();
                DMatrix::from_row_slice(2, 2, &[c, -s, s, c])
            }
            d => DMatrix::identity(d, d),
        }
    }

    /// Derivative of [`Pose::rotation`] with respect to the angle.
    pub fn rotation_dtheta(&self) -> DMatrix<f64> {
        match self.dim() {
            2 => {
                let (s, c) = self.theta.sin_cos();
                DMatrix::from_row_slice(2, 2, &[-s, -c, c, -s])
            }
            d => DMatrix::zeros(d, d),
        }
    }

    /// Body-frame coordinates of the world point `p`.
    pub fn to_body(&self, p: &DVector<f64>) -> DVector<f64> {
        self.rotation().transpose() * (p - &self.x)
    }

    /// World pose of a frame given by `offset` relative to `self`.
    pub fn compose(&self, offset: &Pose) -> Pose {
        Pose {
            x: &self.x + self.rotation() * &offset.x,
            theta: self.theta + offset.theta,
        }
    }
}

/// A convex shape primitive, encoded as constraint data in the body frame.
///
/// Matrices and axis vectors are expressed in the body frame; the world-frame
/// placement comes from the [`Pose`] supplied at evaluation time.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ShapePrimitive {
    /// `{w : a^T w <= b}`. Scaling-invariant (used for environments).
    HalfSpace { a: DVector<f64>, b: f64 },
    /// `{w : A w <= alpha b}`; must be bounded with `b > 0` (origin interior).
    Polytope { a: DMatrix<f64>, b: DVector<f64> },
    /// Polytope dilated by a ball of the given radius.
    PaddedPolytope { a: DMatrix<f64>, b: DVector<f64>, radius: f64 },
    /// `{w : w^T E^T E w <= alpha^2}` with invertible `E`.
    Ellipsoid { e: DMatrix<f64> },
    /// Segment of half-length `length / 2` along `axis`, dilated by `radius`.
    Capsule { radius: f64, length: f64, axis: DVector<f64> },
    /// 3D only: finite cylinder of the given radius and length along `axis`.
    Cylinder { radius: f64, length: f64, axis: DVector<f64> },
    /// 3D only: solid cone with half-angle `half_angle`, height `height`,
    /// apex pointing along `-axis`, centroid at the origin.
    Cone { half_angle: f64, height: f64, axis: DVector<f64> },
}

impl ShapePrimitive {
    /// Axis-aligned 2D box with the given half-extents: rows
    /// `[-e_y, e_x, e_y, -e_x]`, offsets `[hy, hx, hy, hx]`.
    pub fn box2d(hx: f64, hy: f64) -> ShapePrimitive {
        ShapePrimitive::Polytope {
            a: DMatrix::from_row_slice(4, 2, &[0.0, -1.0, 1.0, 0.0, 0.0, 1.0, -1.0, 0.0]),
            b: DVector::from_vec(vec![hy, hx, hy, hx]),
        }
    }

    /// Circle of the given radius (an isotropic ellipsoid).
    pub fn circle(radius: f64) -> ShapePrimitive {
        ShapePrimitive::Ellipsoid {
            e: DMatrix::from_diagonal_element(2, 2, 1.0 / radius),
        }
    }

    /// Ground half-space `{y <= 0}` in its own frame.
    pub fn ground2d() -> ShapePrimitive {
        ShapePrimitive::HalfSpace { a: DVector::from_vec(vec![0.0, 1.0]), b: 0.0 }
    }

    /// Regular polygon with `sides` vertices at the given circumradius.
    pub fn regular_polygon(sides: usize, radius: f64) -> ShapePrimitive {
        assert!(sides >= 3);
        let apothem = radius * (std::f64::consts::PI / sides as f64).cos();
        let mut rows = Vec::with_capacity(2 * sides);
        for k in 0..sides {
            let phi = std::f64::consts::TAU * (k as f64 + 0.5) / sides as f64;
            rows.push(phi.cos());
            rows.push(phi.sin());
        }
        ShapePrimitive::Polytope {
            a: DMatrix::from_row_slice(sides, 2, &rows),
            b: DVector::from_element(sides, apothem),
        }
    }

    /// Spatial dimension the primitive lives in.
    pub fn dim(&self) -> usize {
        match self {
            ShapePrimitive::HalfSpace { a, .. } => a.len(),
            ShapePrimitive::Polytope { a, .. }
            | ShapePrimitive::PaddedPolytope { a, .. } => a.ncols(),
            ShapePrimitive::Ellipsoid { e } => e.ncols(),
            ShapePrimitive::Capsule { axis, .. }
            | ShapePrimitive::Cylinder { axis, .. }
            | ShapePrimitive::Cone { axis, .. } => axis.len(),
        }
    }

    /// Number of auxiliary variables the constraint carries.
    pub fn aux_dim(&self) -> usize {
        match self {
            ShapePrimitive::PaddedPolytope { .. } => self.dim(),
            ShapePrimitive::Capsule { .. } | ShapePrimitive::Cylinder { .. } => 1,
            _ => 0,
        }
    }

    /// Number of stacked inequality rows.
    pub fn constraint_dim(&self) -> usize {
        match self {
            ShapePrimitive::HalfSpace { .. } | ShapePrimitive::Ellipsoid { .. } => 1,
            ShapePrimitive::Polytope { a, .. } => a.nrows(),
            ShapePrimitive::PaddedPolytope { a, .. } => a.nrows() + 1,
            ShapePrimitive::Capsule { .. } => 3,
            ShapePrimitive::Cylinder { .. } => 5,
            ShapePrimitive::Cone { .. } => 2,
        }
    }

    /// True when the constraint does not depend on the scaling variable.
    pub fn scaling_invariant(&self) -> bool {
        matches!(self, ShapePrimitive::HalfSpace { .. })
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::config(format!("{msg}: {self:?}")));
        match self {
            ShapePrimitive::HalfSpace { a, .. } => {
                if a.norm() == 0.0 {
                    return bad("half-space normal must be nonzero");
                }
            }
            ShapePrimitive::Polytope { a, b }
            | ShapePrimitive::PaddedPolytope { a, b, .. } => {
                if a.nrows() != b.len() {
                    return bad("polytope row count mismatch");
                }
                if b.iter().any(|v| *v <= 0.0) {
                    return bad("polytope offsets must be positive (centered form)");
                }
                if a.ncols() == 2 && !normals_positively_span_2d(a) {
                    return bad("polytope is unbounded");
                }
                if let ShapePrimitive::PaddedPolytope { radius, .. } = self {
                    if *radius <= 0.0 {
                        return bad("padding radius must be positive");
                    }
                }
            }
            ShapePrimitive::Ellipsoid { e } => {
                if !e.is_square() || e.clone().lu().determinant().abs() < 1e-12 {
                    return bad("ellipsoid matrix must be square and invertible");
                }
            }
            ShapePrimitive::Capsule { radius, length, axis }
            | ShapePrimitive::Cylinder { radius, length, axis } => {
                if *radius <= 0.0 || *length <= 0.0 {
                    return bad("radius and length must be positive");
                }
                if (axis.norm() - 1.0).abs() > 1e-9 {
                    return bad("axis must be unit norm");
                }
                if matches!(self, ShapePrimitive::Cylinder { .. }) && self.dim() != 3 {
                    return bad("cylinders are 3D only");
                }
            }
            ShapePrimitive::Cone { half_angle, height, axis } => {
                if *height <= 0.0 {
                    return bad("cone height must be positive");
                }
                if !(*half_angle > 0.0 && *half_angle < std::f64::consts::FRAC_PI_2) {
                    return bad("cone half-angle must lie in (0, pi/2)");
                }
                if (axis.norm() - 1.0).abs() > 1e-9 || self.dim() != 3 {
                    return bad("cone axis must be unit norm and 3D");
                }
            }
        }
        Ok(())
    }
}

/// Vertices of the bounded polytope `{w : A w <= b}` by exhaustive
/// enumeration of row subsets. Intended for small systems (narrow-phase
/// shapes), not general vertex enumeration.
pub fn polytope_vertices(a: &DMatrix<f64>, b: &DVector<f64>) -> Vec<DVector<f64>> {
    let m = a.nrows();
    let d = a.ncols();
    let mut verts: Vec<DVector<f64>> = Vec::new();
    let mut subset = vec![0usize; d];
    fn rec(
        a: &DMatrix<f64>,
        b: &DVector<f64>,
        subset: &mut Vec<usize>,
        depth: usize,
        start: usize,
        verts: &mut Vec<DVector<f64>>,
    ) {
        let d = a.ncols();
        if depth == d {
            let mut sys = DMatrix::zeros(d, d);
            let mut rhs = DVector::zeros(d);
            for (i, &row) in subset.iter().enumerate() {
                sys.row_mut(i).copy_from(&a.row(row));
                rhs[i] = b[row];
            }
            if let Some(x) = sys.lu().solve(&rhs) {
                let slack = a * &x - b;
                if slack.iter().all(|s| *s <= 1e-9) {
                    let dup = verts.iter().any(|v| (v - &x).norm() < 1e-9);
                    if !dup && x.iter().all(|c| c.is_finite()) {
                        verts.push(x);
                    }
                }
            }
            return;
        }
        for row in start..a.nrows() {
            subset[depth] = row;
            rec(a, b, subset, depth + 1, row + 1, verts);
        }
    }
    rec(a, b, &mut subset, 0, 0, &mut verts);
    let _ = m;
    verts
}

impl ShapePrimitive {
    /// Upper bound on the distance from the shape's origin to its farthest
    /// point at unit scaling; `None` for unbounded shapes.
    pub fn radial_bound(&self) -> Option<f64> {
        match self {
            ShapePrimitive::HalfSpace { .. } => None,
            ShapePrimitive::Polytope { a, b } => Some(
                polytope_vertices(a, b)
                    .iter()
                    .map(|v| v.norm())
                    .fold(0.0, f64::max),
            ),
            ShapePrimitive::PaddedPolytope { a, b, radius } => Some(
                polytope_vertices(a, b)
                    .iter()
                    .map(|v| v.norm())
                    .fold(0.0, f64::max)
                    + radius,
            ),
            ShapePrimitive::Ellipsoid { e } => {
                let svd = e.clone().svd(false, false);
                let smin = svd.singular_values.min();
                Some(1.0 / smin)
            }
            ShapePrimitive::Capsule { radius, length, .. } => Some(length / 2.0 + radius),
            ShapePrimitive::Cylinder { radius, length, .. } => {
                Some((length * length / 4.0 + radius * radius).sqrt())
            }
            ShapePrimitive::Cone { half_angle, height, axis: _ } => {
                let base_r = half_angle.tan() * height;
                Some((0.75 * height).max((height / 4.0).hypot(base_r)))
            }
        }
    }
}

impl ConvexShape {
    /// Radial bound of the shape, accounting for member offsets.
    pub fn radial_bound(&self) -> Option<f64> {
        match self {
            ConvexShape::Primitive(p) => p.radial_bound(),
            ConvexShape::MinkowskiSum { left, right } => {
                let l = left.shape.radial_bound()? + left.offset.x.norm();
                let r = right.shape.radial_bound()? + right.offset.x.norm();
                Some(l + r)
            }
        }
    }
}

/// Bounded 2D polytope check: outward normals must positively span the plane.
fn normals_positively_span_2d(a: &DMatrix<f64>) -> bool {
    let mut angles: Vec<f64> = (0..a.nrows())
        .map(|i| a[(i, 1)].atan2(a[(i, 0)]))
        .collect();
    angles.sort_by(|x, y| x.partial_cmp(y).unwrap());
    if angles.is_empty() {
        return false;
    }
    let mut max_gap: f64 = 0.0;
    for i in 0..angles.len() {
        let next = if i + 1 == angles.len() {
            angles[0] + std::f64::consts::TAU
        } else {
            angles[i + 1]
        };
        max_gap = max_gap.max(next - angles[i]);
    }
    max_gap < std::f64::consts::PI - 1e-12
}

/// A convex set: either a primitive or a Minkowski sum of two convex sets.
///
/// Sums stack the two constraints with an auxiliary split point, so the result
/// is itself a smooth inequality constraint and can be composed recursively.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum ConvexShape {
    Primitive(ShapePrimitive),
    MinkowskiSum { left: Box<OffsetShape>, right: Box<OffsetShape> },
}

/// A convex shape placed at a fixed offset within its parent frame.
///
/// Offset translations scale with `alpha` so that the scaled composite is an
/// exact homothety of the unscaled one about the parent origin.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OffsetShape {
    pub shape: ConvexShape,
    pub offset: Pose,
}

impl OffsetShape {
    pub fn centered(shape: ConvexShape) -> Self {
        let dim = shape.dim();
        OffsetShape { shape, offset: Pose::identity(dim) }
    }
}

impl From<ShapePrimitive> for ConvexShape {
    fn from(p: ShapePrimitive) -> Self {
        ConvexShape::Primitive(p)
    }
}

impl ConvexShape {
    pub fn dim(&self) -> usize {
        match self {
            ConvexShape::Primitive(p) => p.dim(),
            ConvexShape::MinkowskiSum { left, .. } => left.shape.dim(),
        }
    }

    pub fn aux_dim(&self) -> usize {
        match self {
            ConvexShape::Primitive(p) => p.aux_dim(),
            ConvexShape::MinkowskiSum { left, right } => {
                left.shape.aux_dim() + right.shape.aux_dim() + self.dim()
            }
        }
    }

    pub fn constraint_dim(&self) -> usize {
        match self {
            ConvexShape::Primitive(p) => p.constraint_dim(),
            ConvexShape::MinkowskiSum { left, right } => {
                left.shape.constraint_dim() + right.shape.constraint_dim()
            }
        }
    }

    /// True when no constraint row depends on the scaling variable.
    pub fn scaling_invariant(&self) -> bool {
        match self {
            ConvexShape::Primitive(p) => p.scaling_invariant(),
            ConvexShape::MinkowskiSum { left, right } => {
                left.shape.scaling_invariant() && right.shape.scaling_invariant()
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ConvexShape::Primitive(p) => p.validate(),
            ConvexShape::MinkowskiSum { left, right } => {
                if left.shape.dim() != right.shape.dim() {
                    return Err(Error::config("Minkowski sum dimension mismatch"));
                }
                left.shape.validate()?;
                left.offset.validate()?;
                right.shape.validate()?;
                right.offset.validate()
            }
        }
    }
}

/// Minkowski sum of two centered shapes.
pub fn minkowski_sum(a: ConvexShape, b: ConvexShape) -> Result<ConvexShape> {
    minkowski_sum_offset(
        OffsetShape::centered(a),
        OffsetShape::centered(b),
    )
}

/// Minkowski sum of two shapes held at fixed offsets in the composite frame.
pub fn minkowski_sum_offset(a: OffsetShape, b: OffsetShape) -> Result<ConvexShape> {
    let shape = ConvexShape::MinkowskiSum { left: Box::new(a), right: Box::new(b) };
    shape.validate()?;
    Ok(shape)
}

/// How the members of a [`ConvexBundle`] combine into a shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BundleMode {
    /// Members are independent convex pieces; each generates its own
    /// contact pairs. The union may be nonconvex.
    Union,
    /// Members are folded into a single convex Minkowski-sum composite.
    MinkowskiSum,
}

/// A (possibly nonconvex) shape built from convex members.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvexBundle {
    pub members: Vec<OffsetShape>,
    pub mode: BundleMode,
}

impl ConvexBundle {
    pub fn union(members: Vec<OffsetShape>) -> Result<Self> {
        let bundle = ConvexBundle { members, mode: BundleMode::Union };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn single(shape: ConvexShape) -> Result<Self> {
        Self::union(vec![OffsetShape::centered(shape)])
    }

    pub fn minkowski(members: Vec<OffsetShape>) -> Result<Self> {
        let bundle = ConvexBundle { members, mode: BundleMode::MinkowskiSum };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn dim(&self) -> usize {
        self.members[0].shape.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::config("bundle must have at least one member"));
        }
        let dim = self.members[0].shape.dim();
        for m in &self.members {
            if m.shape.dim() != dim {
                return Err(Error::config("bundle members must share a dimension"));
            }
            m.shape.validate()?;
            m.offset.validate()?;
        }
        Ok(())
    }

    /// Convex pieces that interact as independent contact primitives.
    ///
    /// Union bundles expose their members; Minkowski bundles collapse into a
    /// single composite member.
    pub fn effective_members(&self) -> Vec<OffsetShape> {
        match self.mode {
            BundleMode::Union => self.members.clone(),
            BundleMode::MinkowskiSum => {
                let mut iter = self.members.iter().cloned();
                let first = iter.next().expect("validated nonempty");
                let combined = iter.fold(first, |acc, next| OffsetShape {
                    shape: ConvexShape::MinkowskiSum {
                        left: Box::new(acc),
                        right: Box::new(next),
                    },
                    offset: Pose::identity(self.dim()),
                });
                vec![combined]
            }
        }
    }
}

/// Cartesian product of the two bundles' effective members, in stable order.
pub fn enumerate_contact_pairs(
    a: &ConvexBundle,
    b: &ConvexBundle,
) -> Vec<(usize, usize)> {
    let na = a.effective_members().len();
    let nb = b.effective_members().len();
    let mut pairs = Vec::with_capacity(na * nb);
    for i in 0..na {
        for j in 0..nb {
            pairs.push((i, j));
        }
    }
    pairs
}
