use thiserror::Error;

/// Errors raised by the funnel MPC library.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid funnel: {0}")]
    InvalidFunnel(String),

    #[error("initial error {error_norm} is not strictly inside the funnel radius {radius}")]
    InitialErrorOutsideFunnel { error_norm: f64, radius: f64 },

    #[error("gain k_{index} = {gain} is below its lower bound {bound}")]
    InadmissibleGain { index: usize, gain: f64, bound: f64 },

    #[error("precondition violated: {0}")]
    PreconditionViolation(String),

    #[error("input gain matrix is singular (condition number {condition})")]
    SingularGain { condition: f64 },

    #[error("delay history does not cover t = {time} (available from {available_from})")]
    HistoryNotCovered { time: f64, available_from: f64 },

    #[error("internal dynamics diverged at t = {time}")]
    DivergedInternalDynamics { time: f64 },

    #[error("no finite-cost control found at t = {time}: {reason}")]
    Infeasible { time: f64, reason: String },

    #[error(
        "recursive feasibility violated at t_hat = {t_hat}: {reason} \
         (e_r margin {margin}, funnel margin {funnel_margin})"
    )]
    RecursiveFeasibilityViolation {
        t_hat: f64,
        reason: String,
        margin: f64,
        funnel_margin: f64,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
