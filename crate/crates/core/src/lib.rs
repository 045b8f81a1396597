//! Planar rigid-body contact simulation with collision detection folded into the
//! time-stepping problem.
//!
//! The engine advances a mechanism one step at a time by solving a single square
//! nonlinear complementarity system that stacks
//!
//! - a first-order variational integrator with Coulomb friction on the
//!   linearized cone ([`dynamics`]),
//! - the KKT conditions of the minimum-scaling collision detection program for
//!   every contact pair ([`collision`]),
//!
//! and solves the whole thing with one primal-dual interior-point method
//! ([`solver`]). Contact points and normals are decided jointly with the contact
//! forces, which keeps the step map well posed even in face-to-face contact
//! where collision detection alone has a continuum of solutions.
//!
//! Gradients of the step map come from the implicit function theorem applied to
//! the relaxed residual ([`sensitivity`]); the relaxation level used for
//! differentiation is decoupled from the one used for simulation.
//!
//! [`bilevel`] provides the classical alternative (outer root-finding over the
//! dynamics, inner collision solves per residual evaluation) for head-to-head
//! comparisons.

pub mod bilevel;
pub mod collision;
pub mod config;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod linalg;
pub mod sensitivity;
pub mod solver;

pub use error::Error;

/// Convenience alias used across the crate.
pub type Result<T> = std::result::Result<T, Error>;
