//! Shared test oracles: closed-form memberships, exact 2D distance
//! arithmetic, and a bisection-on-alpha collision oracle that never touches
//! the solver path.

#![allow(dead_code)]

use contactsim::geometry::{ConvexShape, Pose, ShapePrimitive};
use nalgebra::{DMatrix, DVector, Vector2};
use rand::Rng;

pub fn dvec(v: &[f64]) -> DVector<f64> {
    DVector::from_vec(v.to_vec())
}

// --- exact planar distance helpers --------------------------------------

pub fn dist_point_segment(p: Vector2<f64>, a: Vector2<f64>, b: Vector2<f64>) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return (p - a).norm();
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    (p - (a + t * ab)).norm()
}

pub fn dist_segment_segment(
    a1: Vector2<f64>,
    a2: Vector2<f64>,
    b1: Vector2<f64>,
    b2: Vector2<f64>,
) -> f64 {
    if segments_intersect(a1, a2, b1, b2) {
        return 0.0;
    }
    dist_point_segment(a1, b1, b2)
        .min(dist_point_segment(a2, b1, b2))
        .min(dist_point_segment(b1, a1, a2))
        .min(dist_point_segment(b2, a1, a2))
}

fn orient(a: Vector2<f64>, b: Vector2<f64>, c: Vector2<f64>) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

pub fn segments_intersect(
    a1: Vector2<f64>,
    a2: Vector2<f64>,
    b1: Vector2<f64>,
    b2: Vector2<f64>,
) -> bool {
    let d1 = orient(b1, b2, a1);
    let d2 = orient(b1, b2, a2);
    let d3 = orient(a1, a2, b1);
    let d4 = orient(a1, a2, b2);
    (d1 * d2 <= 0.0) && (d3 * d4 <= 0.0)
}

pub fn polygon_contains(p: Vector2<f64>, verts: &[Vector2<f64>]) -> bool {
    // Convex polygon with consistent winding: all cross products share a sign.
    let n = verts.len();
    let mut pos = false;
    let mut neg = false;
    for i in 0..n {
        let c = orient(verts[i], verts[(i + 1) % n], p);
        if c > 0.0 {
            pos = true;
        }
        if c < 0.0 {
            neg = true;
        }
    }
    !(pos && neg)
}

pub fn dist_point_polygon(p: Vector2<f64>, verts: &[Vector2<f64>]) -> f64 {
    if polygon_contains(p, verts) {
        return 0.0;
    }
    let n = verts.len();
    (0..n)
        .map(|i| dist_point_segment(p, verts[i], verts[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

/// Separating-axis test for two convex polygons.
pub fn polygons_intersect(va: &[Vector2<f64>], vb: &[Vector2<f64>]) -> bool {
    let axes = |verts: &[Vector2<f64>]| -> Vec<Vector2<f64>> {
        let n = verts.len();
        (0..n)
            .map(|i| {
                let e = verts[(i + 1) % n] - verts[i];
                Vector2::new(-e.y, e.x)
            })
            .collect()
    };
    for axis in axes(va).into_iter().chain(axes(vb)) {
        let project = |verts: &[Vector2<f64>]| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for v in verts {
                let t = v.dot(&axis);
                lo = lo.min(t);
                hi = hi.max(t);
            }
            (lo, hi)
        };
        let (alo, ahi) = project(va);
        let (blo, bhi) = project(vb);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}

pub fn dist_polygon_polygon(va: &[Vector2<f64>], vb: &[Vector2<f64>]) -> f64 {
    if polygons_intersect(va, vb) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    let na = va.len();
    let nb = vb.len();
    for i in 0..na {
        for j in 0..nb {
            best = best.min(dist_segment_segment(
                va[i],
                va[(i + 1) % na],
                vb[j],
                vb[(j + 1) % nb],
            ));
        }
    }
    best
}

pub fn dist_segment_polygon(
    s1: Vector2<f64>,
    s2: Vector2<f64>,
    verts: &[Vector2<f64>],
) -> f64 {
    if polygon_contains(s1, verts) || polygon_contains(s2, verts) {
        return 0.0;
    }
    let n = verts.len();
    let mut best = f64::INFINITY;
    for i in 0..n {
        if segments_intersect(s1, s2, verts[i], verts[(i + 1) % n]) {
            return 0.0;
        }
        best = best.min(dist_segment_segment(s1, s2, verts[i], verts[(i + 1) % n]));
    }
    best
}

// --- oracle-side shape descriptions --------------------------------------

/// Independent description of a test shape, carrying whatever exact geometry
/// the oracle needs (vertices, radii, axes) in the body frame.
#[derive(Clone, Debug)]
pub enum OracleShape {
    Polygon { verts: Vec<Vector2<f64>> },
    Circle { r: f64 },
    Capsule { r: f64, half: f64, axis: Vector2<f64> },
    PaddedBox { hx: f64, hy: f64, r: f64 },
    HalfSpace { a: Vector2<f64>, b: f64 },
}

/// A shape under test: the engine-side constraint plus the oracle-side
/// geometry and the world pose.
#[derive(Clone, Debug)]
pub struct PairSide {
    pub shape: ConvexShape,
    pub oracle: OracleShape,
    pub pose: Pose,
}

impl PairSide {
    fn world(&self, v: Vector2<f64>, alpha: f64) -> Vector2<f64> {
        let r = self.pose.rotation();
        let rotated = &r * DVector::from_vec(vec![alpha * v.x, alpha * v.y]);
        Vector2::new(self.pose.x[0] + rotated[0], self.pose.x[1] + rotated[1])
    }

    pub fn world_polygon(&self, verts: &[Vector2<f64>], alpha: f64) -> Vec<Vector2<f64>> {
        verts.iter().map(|v| self.world(*v, alpha)).collect()
    }

    fn world_segment(&self, half: f64, axis: Vector2<f64>, alpha: f64) -> (Vector2<f64>, Vector2<f64>) {
        (self.world(axis * half, alpha), self.world(-axis * half, alpha))
    }

    fn center(&self) -> Vector2<f64> {
        Vector2::new(self.pose.x[0], self.pose.x[1])
    }

    fn padded_box_polygon(&self, hx: f64, hy: f64, alpha: f64) -> Vec<Vector2<f64>> {
        self.world_polygon(
            &[
                Vector2::new(hx, hy),
                Vector2::new(-hx, hy),
                Vector2::new(-hx, -hy),
                Vector2::new(hx, -hy),
            ],
            alpha,
        )
    }

    /// Support value `max_{x in alpha*shape} d . x` for a unit direction `d`.
    pub fn support(&self, d: Vector2<f64>, alpha: f64) -> f64 {
        match &self.oracle {
            OracleShape::Polygon { verts } => self
                .world_polygon(verts, alpha)
                .iter()
                .map(|v| v.dot(&d))
                .fold(f64::NEG_INFINITY, f64::max),
            OracleShape::Circle { r } => self.center().dot(&d) + alpha * r,
            OracleShape::Capsule { r, half, axis } => {
                let (e1, e2) = self.world_segment(*half, *axis, alpha);
                e1.dot(&d).max(e2.dot(&d)) + alpha * r
            }
            OracleShape::PaddedBox { hx, hy, r } => {
                self.padded_box_polygon(*hx, *hy, alpha)
                    .iter()
                    .map(|v| v.dot(&d))
                    .fold(f64::NEG_INFINITY, f64::max)
                    + alpha * r
            }
            OracleShape::HalfSpace { .. } => f64::INFINITY,
        }
    }
}

/// Exact intersection test between the alpha-scaled shapes of a pair.
pub fn scaled_intersect(a: &PairSide, b: &PairSide, alpha: f64) -> bool {
    use OracleShape::*;
    // Canonicalize: half-space second.
    if matches!(a.oracle, HalfSpace { .. }) && !matches!(b.oracle, HalfSpace { .. }) {
        return scaled_intersect(b, a, alpha);
    }
    match (&a.oracle, &b.oracle) {
        (_, HalfSpace { a: n, b: off }) => {
            // Intersects iff min over shape of n.x - off <= 0, i.e.
            // -support(-n) <= off (world frame, env pose applies to n).
            let rot = b.pose.rotation();
            let nw = &rot * DVector::from_vec(vec![n.x, n.y]);
            let nw = Vector2::new(nw[0], nw[1]);
            let plane_off = off + nw.dot(&b.center());
            -a.support(-nw, alpha) <= plane_off
        }
        (Polygon { verts: va }, Polygon { verts: vb }) => {
            polygons_intersect(&a.world_polygon(va, alpha), &b.world_polygon(vb, alpha))
        }
        (Polygon { verts }, Circle { r }) => {
            dist_point_polygon(b.center(), &a.world_polygon(verts, alpha)) <= alpha * r
        }
        (Circle { r }, Polygon { verts }) => {
            dist_point_polygon(a.center(), &b.world_polygon(verts, alpha)) <= alpha * r
        }
        (Polygon { verts }, Capsule { r, half, axis }) => {
            let (e1, e2) = b.world_segment(*half, *axis, alpha);
            dist_segment_polygon(e1, e2, &a.world_polygon(verts, alpha)) <= alpha * r
        }
        (Capsule { r, half, axis }, Polygon { verts }) => {
            let (e1, e2) = a.world_segment(*half, *axis, alpha);
            dist_segment_polygon(e1, e2, &b.world_polygon(verts, alpha)) <= alpha * r
        }
        (Polygon { verts }, PaddedBox { hx, hy, r }) => {
            dist_polygon_polygon(
                &a.world_polygon(verts, alpha),
                &b.padded_box_polygon(*hx, *hy, alpha),
            ) <= alpha * r
        }
        (PaddedBox { hx, hy, r }, Polygon { verts }) => {
            dist_polygon_polygon(
                &b.world_polygon(verts, alpha),
                &a.padded_box_polygon(*hx, *hy, alpha),
            ) <= alpha * r
        }
        (Circle { r: r1 }, Circle { r: r2 }) => {
            (a.center() - b.center()).norm() <= alpha * (r1 + r2)
        }
        (Circle { r: rc }, Capsule { r, half, axis }) => {
            let (e1, e2) = b.world_segment(*half, *axis, alpha);
            dist_point_segment(a.center(), e1, e2) <= alpha * (rc + r)
        }
        (Capsule { r, half, axis }, Circle { r: rc }) => {
            let (e1, e2) = a.world_segment(*half, *axis, alpha);
            dist_point_segment(b.center(), e1, e2) <= alpha * (rc + r)
        }
        (Circle { r: rc }, PaddedBox { hx, hy, r }) => {
            dist_point_polygon(a.center(), &b.padded_box_polygon(*hx, *hy, alpha))
                <= alpha * (rc + r)
        }
        (PaddedBox { hx, hy, r }, Circle { r: rc }) => {
            dist_point_polygon(b.center(), &a.padded_box_polygon(*hx, *hy, alpha))
                <= alpha * (rc + r)
        }
        (Capsule { r: r1, half: h1, axis: x1 }, Capsule { r: r2, half: h2, axis: x2 }) => {
            let (a1, a2) = a.world_segment(*h1, *x1, alpha);
            let (b1, b2) = b.world_segment(*h2, *x2, alpha);
            dist_segment_segment(a1, a2, b1, b2) <= alpha * (r1 + r2)
        }
        (Capsule { r: rc, half, axis }, PaddedBox { hx, hy, r }) => {
            let (e1, e2) = a.world_segment(*half, *axis, alpha);
            dist_segment_polygon(e1, e2, &b.padded_box_polygon(*hx, *hy, alpha))
                <= alpha * (rc + r)
        }
        (PaddedBox { hx, hy, r }, Capsule { r: rc, half, axis }) => {
            let (e1, e2) = b.world_segment(*half, *axis, alpha);
            dist_segment_polygon(e1, e2, &a.padded_box_polygon(*hx, *hy, alpha))
                <= alpha * (rc + r)
        }
        (PaddedBox { hx: x1, hy: y1, r: r1 }, PaddedBox { hx: x2, hy: y2, r: r2 }) => {
            dist_polygon_polygon(
                &a.padded_box_polygon(*x1, *y1, alpha),
                &b.padded_box_polygon(*x2, *y2, alpha),
            ) <= alpha * (r1 + r2)
        }
        (HalfSpace { .. }, _) => unreachable!("canonicalized"),
    }
}

/// Bisection on the scaling: the smallest alpha at which the scaled shapes
/// intersect, solver-free.
pub fn bisect_alpha(a: &PairSide, b: &PairSide, iters: usize) -> f64 {
    let mut lo = 1e-9;
    let mut hi = 1.0;
    let mut guard = 0;
    while !scaled_intersect(a, b, hi) {
        hi *= 2.0;
        guard += 1;
        assert!(guard < 60, "pair never intersects");
    }
    if scaled_intersect(a, b, lo) {
        return lo;
    }
    for _ in 0..iters {
        let mid = 0.5 * (lo + hi);
        if scaled_intersect(a, b, mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Closed-form membership of a world point in the alpha-scaled shape.
pub fn oracle_contains(side: &PairSide, p: Vector2<f64>, alpha: f64) -> bool {
    match &side.oracle {
        OracleShape::Polygon { verts } => {
            polygon_contains(p, &side.world_polygon(verts, alpha))
        }
        OracleShape::Circle { r } => (p - side.center()).norm() <= alpha * r,
        OracleShape::Capsule { r, half, axis } => {
            let (e1, e2) = side.world_segment(*half, *axis, alpha);
            dist_point_segment(p, e1, e2) <= alpha * r
        }
        OracleShape::PaddedBox { hx, hy, r } => {
            dist_point_polygon(p, &side.padded_box_polygon(*hx, *hy, alpha)) <= alpha * r
        }
        OracleShape::HalfSpace { a, b } => {
            let rot = side.pose.rotation();
            let nw = &rot * DVector::from_vec(vec![a.x, a.y]);
            let nw = Vector2::new(nw[0], nw[1]);
            nw.dot(&(p - side.center())) <= *b
        }
    }
}

/// Rejection-sample a point inside the alpha-scaled shape.
pub fn sample_point(side: &PairSide, alpha: f64, rng: &mut impl Rng) -> Option<Vector2<f64>> {
    let (center, radius) = match &side.oracle {
        OracleShape::Polygon { verts } => (
            side.center(),
            verts.iter().map(|v| v.norm()).fold(0.0, f64::max) * alpha,
        ),
        OracleShape::Circle { r } => (side.center(), r * alpha),
        OracleShape::Capsule { r, half, .. } => (side.center(), (half + r) * alpha),
        OracleShape::PaddedBox { hx, hy, r } => {
            (side.center(), ((hx * hx + hy * hy).sqrt() + r) * alpha)
        }
        OracleShape::HalfSpace { .. } => return None,
    };
    for _ in 0..256 {
        let p = center
            + Vector2::new(rng.gen_range(-radius..radius), rng.gen_range(-radius..radius));
        if oracle_contains(side, p, alpha) {
            return Some(p);
        }
    }
    None
}

// --- random test-shape generators ----------------------------------------

pub fn random_pose(rng: &mut impl Rng, span: f64) -> Pose {
    Pose::planar(
        rng.gen_range(-span..span),
        rng.gen_range(-span..span),
        rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
    )
}

pub fn random_polygon(rng: &mut impl Rng) -> (ConvexShape, OracleShape) {
    let sides = rng.gen_range(3..8usize);
    let radius = rng.gen_range(0.3..1.2);
    let shape: ConvexShape = ShapePrimitive::regular_polygon(sides, radius).into();
    let verts = (0..sides)
        .map(|k| {
            let phi = std::f64::consts::TAU * k as f64 / sides as f64;
            Vector2::new(radius * phi.cos(), radius * phi.sin())
        })
        .collect();
    (shape, OracleShape::Polygon { verts })
}

pub fn random_box(rng: &mut impl Rng) -> (ConvexShape, OracleShape) {
    let hx = rng.gen_range(0.2..1.0);
    let hy = rng.gen_range(0.2..1.0);
    let shape: ConvexShape = ShapePrimitive::box2d(hx, hy).into();
    let verts = vec![
        Vector2::new(hx, hy),
        Vector2::new(-hx, hy),
        Vector2::new(-hx, -hy),
        Vector2::new(hx, -hy),
    ];
    (shape, OracleShape::Polygon { verts })
}

pub fn random_circle(rng: &mut impl Rng) -> (ConvexShape, OracleShape) {
    let r = rng.gen_range(0.2..1.0);
    (ShapePrimitive::circle(r).into(), OracleShape::Circle { r })
}

pub fn random_capsule(rng: &mut impl Rng) -> (ConvexShape, OracleShape) {
    let r = rng.gen_range(0.15..0.5);
    let len = rng.gen_range(0.4..1.6);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let axis = Vector2::new(phi.cos(), phi.sin());
    let shape: ConvexShape = ShapePrimitive::Capsule {
        radius: r,
        length: len,
        axis: dvec(&[axis.x, axis.y]),
    }
    .into();
    (shape, OracleShape::Capsule { r, half: len / 2.0, axis })
}

pub fn random_padded_box(rng: &mut impl Rng) -> (ConvexShape, OracleShape) {
    let hx = rng.gen_range(0.2..0.8);
    let hy = rng.gen_range(0.2..0.8);
    let r = rng.gen_range(0.1..0.4);
    let shape: ConvexShape = ShapePrimitive::PaddedPolytope {
        a: DMatrix::from_row_slice(4, 2, &[0.0, -1.0, 1.0, 0.0, 0.0, 1.0, -1.0, 0.0]),
        b: dvec(&[hy, hx, hy, hx]),
        radius: r,
    }
    .into();
    (shape, OracleShape::PaddedBox { hx, hy, r })
}

pub fn ground_side() -> PairSide {
    PairSide {
        shape: ShapePrimitive::ground2d().into(),
        oracle: OracleShape::HalfSpace { a: Vector2::new(0.0, 1.0), b: 0.0 },
        pose: Pose::identity(2),
    }
}
