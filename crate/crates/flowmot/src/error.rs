//! Error types shared across the library.

use thiserror::Error;

/// Failures that can occur in the numerical core.
///
/// Callers in the tracker loop treat most of these as containable: a failed
/// flow for one measurement hypothesis falls back to the unmoved prior
/// particles instead of aborting the whole update.
#[derive(Debug, Error)]
pub enum Error {
    /// A covariance matrix was not positive definite even after jitter.
    #[error("covariance not positive definite after regularization")]
    StillSingular,

    /// The innovation matrix `lambda * H P H' + R` could not be inverted.
    #[error("singular innovation matrix in flow step at lambda = {lambda}")]
    SingularInnovation { lambda: f64 },

    /// A particle left the set of finite floating point values during a flow.
    #[error("non-finite particle state produced during flow migration")]
    NonFiniteParticle,

    /// A flow step's migration matrix `I + dl * A` was numerically singular,
    /// so the flow is no longer invertible and no mapping factor exists.
    #[error("flow step not invertible: |det(I + dl*A)| = {det_abs} below threshold")]
    NonInvertibleStep { det_abs: f64 },

    /// All importance weights in a particle set were zero or non-finite.
    #[error("degenerate importance weights: total weight is zero or non-finite")]
    DegenerateWeights,

    /// A state coincides (or nearly coincides) with a receiver position, so
    /// the TDOA Jacobian is undefined.
    #[error("degenerate geometry: state within {dist} m of a receiver")]
    DegenerateGeometry { dist: f64 },

    /// Generic shape/argument mismatch (empty particle set, inconsistent
    /// lengths, invalid parameter).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
