//! Error type shared by every module of the crate.

use thiserror::Error;

/// Convenience alias used throughout the crate.
pub type Result<T> = std::result::Result<T, Error>;

/// All failures the library can report.
///
/// Variants are split between *validation* errors (the input violates a
/// documented precondition) and *solver* errors (a numerical procedure did
/// not converge or left its guarded domain).  [`Error::is_validation`]
/// exposes that split so callers such as the CLI can map errors onto exit
/// codes without matching every variant.
#[derive(Debug, Error)]
pub enum Error {
    /// A model field violates a structural invariant.  `field` names the
    /// offending entry so the message is actionable.
    #[error("invalid model: field `{field}`: {reason}")]
    InvalidModel { field: String, reason: String },

    /// Ring networks need at least three sites for the circulant coupling
    /// pattern to make sense.
    #[error("ring network needs at least 3 oscillators, got {n}")]
    RingTooSmall { n: usize },

    /// The requested operation is only defined for quadratic potentials.
    #[error("{operation} requires a quadratic potential")]
    UnsupportedPotential { operation: &'static str },

    /// A scalar argument is outside its documented domain.
    #[error("invalid argument `{name}`: {reason}")]
    InvalidArgument { name: &'static str, reason: String },

    /// A cooling design was asked to heat: the target temperature must lie
    /// in (0, T].
    #[error("target temperature {t_eff} is not in (0, {t}]: cooling only")]
    HeatingNotCooling { t_eff: f64, t: f64 },

    /// The Lyapunov equation has no unique solution (the drift has a pair
    /// of eigenvalues summing to zero).
    #[error("Lyapunov equation has no unique solution for this drift")]
    NoUniqueSolution,

    /// A direct solve produced a solution whose back-substituted residual
    /// exceeds the documented gate (severe ill-conditioning).
    #[error("{operation} residual {residual:.3e} exceeds tolerance {tolerance:.3e}")]
    ResidualTooLarge {
        operation: &'static str,
        residual: f64,
        tolerance: f64,
    },

    /// A covariance matrix that must be positive definite is not.
    #[error("covariance is singular or indefinite in {context}")]
    SingularCovariance { context: &'static str },

    /// A deterministic integration produced non-finite values.
    #[error("integration diverged at t = {t}")]
    IntegrationDiverged { t: f64 },

    /// The Riccati flow left the guarded domain (entries above the blow-up
    /// threshold), so the current shooting iterate is unusable.
    #[error("Riccati flow blew up at t = {t} (max entry {max_entry:.3e})")]
    RiccatiBlowUp { t: f64, max_entry: f64 },

    /// Newton shooting did not reach the residual tolerance.
    #[error(
        "boundary-value solver failed after {iterations} iterations \
         (residual {residual:.3e})"
    )]
    SolverFailed { iterations: usize, residual: f64 },

    /// The finite-horizon problem needs noise and control to share one
    /// channel: M^-1 * Sigma must be a positive multiple of the identity.
    #[error("noise channel is not scalar: M^-1 Sigma must equal sigma * I")]
    NoiseChannelNotScalar,

    /// A time query fell outside the grid of a computed schedule.
    #[error("time {t} is outside the schedule range [{t0}, {t1}]")]
    TimeOutOfRange { t: f64, t0: f64, t1: f64 },

    /// Statistical estimators need at least two trajectories.
    #[error("{operation} needs at least {required} trajectories, got {got}")]
    InsufficientTrajectories {
        operation: &'static str,
        required: usize,
        got: usize,
    },

    /// A file or stream could not be read or written.
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// A model or report file is not valid JSON of the expected shape.
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// A CSV schedule or trajectory file could not be parsed.
    #[error("csv error: {0}")]
    Csv(String),
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Csv(e.to_string())
    }
}

impl Error {
    /// True for errors caused by bad input rather than numerical failure.
    pub fn is_validation(&self) -> bool {
        !matches!(
            self,
            Error::NoUniqueSolution
                | Error::ResidualTooLarge { .. }
                | Error::IntegrationDiverged { .. }
                | Error::RiccatiBlowUp { .. }
                | Error::SolverFailed { .. }
        )
    }
}
