//! Declarative mechanism and shape definitions (TOML).
//!
//! All quantities are SI: meters, kilograms, seconds, radians. The full
//! schema is documented in the repository README. Sketch:
//!
//! ```toml
//! dt = 0.01
//! gravity = [0.0, -9.81]
//! friction = 0.5
//!
//! [[body]]
//! name = "box"
//! mass = 1.0
//! inertia = 0.0167
//! position = [0.0, 1.0]
//! theta = 0.0
//! [[body.shape]]
//! kind = "polytope"
//! a = [[0.0, -1.0], [1.0, 0.0], [0.0, 1.0], [-1.0, 0.0]]
//! b = [0.1, 0.1, 0.1, 0.1]
//!
//! [[environment]]
//! kind = "halfspace"
//! normal = [0.0, 1.0]
//! offset = 0.0
//! ```

use crate::dynamics::{EnvShape, Mechanism, MechanismState, RigidBody2D};
use crate::geometry::{
    BundleMode, ConvexBundle, ConvexShape, OffsetShape, Pose, ShapePrimitive,
};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, Vector2};
use serde::Deserialize;

/// Top-level config file.
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechanismConfig {
    /// Time step (s).
    pub dt: f64,
    /// Gravity field (m/s^2); default `[0, -9.81]`.
    pub gravity: Option<[f64; 2]>,
    /// Coulomb friction coefficient; default 0.5.
    pub friction: Option<f64>,
    /// Disable tangential friction entirely.
    pub frictionless: Option<bool>,
    #[serde(default, rename = "body")]
    pub bodies: Vec<BodyConfig>,
    #[serde(default, rename = "environment")]
    pub environment: Vec<EnvConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyConfig {
    pub name: Option<String>,
    pub mass: f64,
    pub inertia: f64,
    /// Initial COM position (m).
    pub position: [f64; 2],
    /// Initial orientation (rad); default 0.
    pub theta: Option<f64>,
    /// Initial COM velocity (m/s); default 0.
    pub velocity: Option<[f64; 2]>,
    /// Initial angular velocity (rad/s); default 0.
    pub omega: Option<f64>,
    /// Member composition: "union" (default) or "minkowski".
    pub compose: Option<String>,
    #[serde(rename = "shape")]
    pub shapes: Vec<ShapeConfig>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    #[serde(flatten)]
    pub shape: ShapeConfig,
    /// World position of the shape frame; default origin.
    pub position: Option<[f64; 2]>,
    /// World orientation; default 0.
    pub theta: Option<f64>,
}

/// One shape primitive. `kind` selects the variant; the other fields are
/// matrices/vectors in nested-array form, in the shape's own frame.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeConfig {
    pub kind: String,
    /// Half-space / polytope rows.
    pub a: Option<Vec<Vec<f64>>>,
    /// Polytope offsets, or half-space scalar offset via `offset`.
    pub b: Option<Vec<f64>>,
    /// Half-space normal (alternative to a 1-row `a`).
    pub normal: Option<Vec<f64>>,
    /// Half-space offset.
    pub offset: Option<f64>,
    /// Ellipsoid matrix.
    pub e: Option<Vec<Vec<f64>>>,
    pub radius: Option<f64>,
    pub length: Option<f64>,
    pub axis: Option<Vec<f64>>,
    pub half_angle: Option<f64>,
    pub height: Option<f64>,
    /// Member offset within the body frame.
    pub offset_position: Option<Vec<f64>>,
    pub offset_theta: Option<f64>,
}

fn to_matrix(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if rows.is_empty() || rows[0].is_empty() {
        return Err(Error::config("empty matrix in config"));
    }
    let ncols = rows[0].len();
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::config("ragged matrix in config"));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl ShapeConfig {
    pub fn build(&self) -> Result<ShapePrimitive> {
        let missing = |f: &str| Error::config(format!("shape '{}' requires `{f}`", self.kind));
        let prim = match self.kind.as_str() {
            "halfspace" => {
                let a = if let Some(n) = &self.normal {
                    DVector::from_vec(n.clone())
                } else if let Some(a) = &self.a {
                    let m = to_matrix(a)?;
                    if m.nrows() != 1 {
                        return Err(Error::config("halfspace `a` must have one row"));
                    }
                    m.row(0).transpose()
                } else {
                    return Err(missing("normal"));
                };
                ShapePrimitive::HalfSpace { a, b: self.offset.unwrap_or(0.0) }
            }
            "polytope" => ShapePrimitive::Polytope {
                a: to_matrix(self.a.as_ref().ok_or_else(|| missing("a"))?)?,
                b: DVector::from_vec(self.b.clone().ok_or_else(|| missing("b"))?),
            },
            "padded_polytope" => ShapePrimitive::PaddedPolytope {
                a: to_matrix(self.a.as_ref().ok_or_else(|| missing("a"))?)?,
                b: DVector::from_vec(self.b.clone().ok_or_else(|| missing("b"))?),
                radius: self.radius.ok_or_else(|| missing("radius"))?,
            },
            "ellipsoid" => ShapePrimitive::Ellipsoid {
                e: to_matrix(self.e.as_ref().ok_or_else(|| missing("e"))?)?,
            },
            "capsule" => ShapePrimitive::Capsule {
                radius: self.radius.ok_or_else(|| missing("radius"))?,
                length: self.length.ok_or_else(|| missing("length"))?,
                axis: DVector::from_vec(self.axis.clone().ok_or_else(|| missing("axis"))?),
            },
            "cylinder" => ShapePrimitive::Cylinder {
                radius: self.radius.ok_or_else(|| missing("radius"))?,
                length: self.length.ok_or_else(|| missing("length"))?,
                axis: DVector::from_vec(self.axis.clone().ok_or_else(|| missing("axis"))?),
            },
            "cone" => ShapePrimitive::Cone {
                half_angle: self.half_angle.ok_or_else(|| missing("half_angle"))?,
                height: self.height.ok_or_else(|| missing("height"))?,
                axis: DVector::from_vec(self.axis.clone().ok_or_else(|| missing("axis"))?),
            },
            other => {
                return Err(Error::config(format!("unknown shape kind '{other}'")));
            }
        };
        prim.validate()?;
        Ok(prim)
    }

    fn member_offset(&self, dim: usize) -> Result<Pose> {
        let x = match &self.offset_position {
            Some(x) => DVector::from_vec(x.clone()),
            None => DVector::zeros(dim),
        };
        let pose = Pose::new(x, self.offset_theta.unwrap_or(0.0));
        pose.validate()?;
        Ok(pose)
    }

    pub fn build_member(&self) -> Result<OffsetShape> {
        let prim = self.build()?;
        let offset = self.member_offset(prim.dim())?;
        Ok(OffsetShape { shape: ConvexShape::Primitive(prim), offset })
    }
}

/// A parsed mechanism plus its initial state.
pub struct LoadedMechanism {
    pub mechanism: Mechanism,
    pub state: MechanismState,
    pub body_names: Vec<String>,
}

impl MechanismConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("config parse error: {e}")))
    }

    pub fn build(&self) -> Result<LoadedMechanism> {
        if !(self.dt > 0.0) {
            return Err(Error::config("dt must be positive"));
        }
        let mut bodies = Vec::new();
        let mut names = Vec::new();
        let mut q = Vec::new();
        let mut q_prev = Vec::new();
        for (i, b) in self.bodies.iter().enumerate() {
            let members: Vec<OffsetShape> = b
                .shapes
                .iter()
                .map(|s| s.build_member())
                .collect::<Result<_>>()?;
            let mode = match b.compose.as_deref() {
                None | Some("union") => BundleMode::Union,
                Some("minkowski") => BundleMode::MinkowskiSum,
                Some(other) => {
                    return Err(Error::config(format!("unknown compose mode '{other}'")));
                }
            };
            let bundle = ConvexBundle { members, mode };
            bundle.validate()?;
            bodies.push(RigidBody2D { mass: b.mass, inertia: b.inertia, bundle });
            names.push(b.name.clone().unwrap_or_else(|| format!("body{i}")));
            let theta = b.theta.unwrap_or(0.0);
            let vel = b.velocity.unwrap_or([0.0, 0.0]);
            let omega = b.omega.unwrap_or(0.0);
            q.extend_from_slice(&[b.position[0], b.position[1], theta]);
            q_prev.extend_from_slice(&[
                b.position[0] - vel[0] * self.dt,
                b.position[1] - vel[1] * self.dt,
                theta - omega * self.dt,
            ]);
        }
        let env = self
            .environment
            .iter()
            .map(|e| {
                let prim = e.shape.build()?;
                let x = e.position.map(|p| p.to_vec()).unwrap_or_else(|| vec![0.0, 0.0]);
                let pose = Pose::new(DVector::from_vec(x), e.theta.unwrap_or(0.0));
                pose.validate()?;
                Ok(EnvShape { shape: ConvexShape::Primitive(prim), pose })
            })
            .collect::<Result<Vec<_>>>()?;
        let gravity = self.gravity.unwrap_or([0.0, -9.81]);
        let mechanism = Mechanism {
            bodies,
            env,
            gravity: Vector2::new(gravity[0], gravity[1]),
            mu: self.friction.unwrap_or(0.5),
            friction: !self.frictionless.unwrap_or(false),
        };
        mechanism.validate()?;
        let nq = mechanism.nq();
        let state = MechanismState {
            q_prev: DVector::from_vec(q_prev),
            q: DVector::from_vec(q),
            u: DVector::zeros(nq),
            dt: self.dt,
        };
        state.validate(&mechanism)?;
        Ok(LoadedMechanism { mechanism, state, body_names: names })
    }
}

/// Parse and build a mechanism from TOML text.
pub fn load_mechanism(text: &str) -> Result<LoadedMechanism> {
    MechanismConfig::parse(text)?.build()
}
