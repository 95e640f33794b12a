use thiserror::Error;

/// Errors shared across the crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid rate function: {0}")]
    InvalidRate(String),

    #[error("invalid jump law: {0}")]
    InvalidLaw(String),

    #[error("invalid initial condition: {0}")]
    InvalidInitial(String),

    #[error("quadrature did not converge: requested tol {requested:e}, achieved {achieved:e}")]
    QuadratureTolerance { requested: f64, achieved: f64 },

    #[error("total jump rate overflowed; most-lagging particle at x - m = {min_rel_pos}")]
    RateOverflow { min_rel_pos: f64 },

    #[error("event count exceeded cap of {cap}; record truncated at t = {t}")]
    EventCapExceeded { cap: u64, t: f64 },

    #[error("test function outside H (bounded continuous with |f| <= 1, or identity): {0}")]
    NotInTestClass(String),

    #[error("event log was not retained for this run; enable event recording")]
    MissingEventLog,

    #[error("series diverges within truncation (is the rate function constant?)")]
    SeriesDivergence,

    #[error("stationary solver did not reach residual {requested:e}; achieved {achieved:e}")]
    StationaryResidual { requested: f64, achieved: f64 },

    #[error(
        "truncation boundary flux {flux:e} above threshold {threshold:e}; \
         enlarge the truncation radius (currently {radius})"
    )]
    TruncationFlux { flux: f64, threshold: f64, radius: i64 },

    #[error("domain leak: mass {mass:e} in the outer {fraction}% of cells (limit {limit:e})")]
    DomainLeak { mass: f64, fraction: f64, limit: f64 },

    #[error("time step rejected {retries} times (negative density {worst:e}); aborting")]
    StepRejection { retries: u32, worst: f64 },

    #[error("jump law has no density: {0}")]
    NoDensity(String),

    #[error("no sign change found while bracketing the wave speed: {0}")]
    NoBracket(String),

    #[error("grid spacing {dx} must divide the unit jump exactly for deterministic jumps")]
    IncommensurateGrid { dx: f64 },

    #[error("mismatched configurations: {0}")]
    ConfigMismatch(String),

    #[error("{0}")]
    InvalidArgument(String),
}

pub type Result<T> = std::result::Result<T, Error>;
