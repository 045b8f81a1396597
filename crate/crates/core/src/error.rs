use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Inconsistent problem setup: dimension mismatches, invalid shape
    /// parameters, unbounded shape pairs, malformed config files.
    #[error("configuration error: {0}")]
    Config(String),

    /// Evaluation at a nondifferentiable point of a shape constraint
    /// (e.g. a capsule queried exactly on its axis).
    #[error("singular evaluation point: {0}")]
    Singularity(String),

    /// The dual-weighted constraint gradient has vanishing norm, so no contact
    /// normal can be extracted.
    #[error("degenerate contact normal: |grad^T lambda| = {norm:.3e}")]
    DegenerateNormal { norm: f64 },

    /// A linear system required by an implicit-function-theorem computation is
    /// rank deficient. Expected in face-to-face contact configurations.
    #[error("rank-deficient system: {0}")]
    RankDeficient(String),

    /// A solve did not reach the requested tolerance.
    #[error("solver did not converge: {0}")]
    NotConverged(String),

    /// Step gradients could not be formed because the step Jacobian is singular.
    #[error("gradient unavailable: {0}")]
    GradientUnavailable(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
