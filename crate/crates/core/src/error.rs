use thiserror::Error;

/// Errors raised by the filtering engine and its oracles.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid model: {what} is non-finite at coordinate {coordinate}")]
    InvalidModel { what: &'static str, coordinate: usize },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("matrix L is not antisymmetric (max |L + L^T| = {max_violation:e})")]
    AsymmetricL { max_violation: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("fields live on different grids")]
    GridMismatch,

    #[error("simulation blew up at t = {time}: |x| = {norm:e} exceeds bound {bound:e}")]
    Blowup { time: f64, norm: f64, bound: f64 },

    #[error("time grid mismatch: {0}")]
    TimeMismatch(String),

    #[error("epsilon {epsilon} too large: drift displacement {displacement} exceeds half band {half_band} in dimension {dim}")]
    EpsilonTooLarge {
        epsilon: f64,
        displacement: f64,
        half_band: f64,
        dim: usize,
    },

    #[error("epsilon {epsilon} too small: kernel width {width} is below grid spacing {spacing} in dimension {dim}")]
    EpsilonTooSmall {
        epsilon: f64,
        width: f64,
        spacing: f64,
        dim: usize,
    },

    #[error("kernel band radius {radius} exceeds grid extent {points} in dimension {dim}")]
    BandExceedsGrid { radius: usize, points: usize, dim: usize },

    #[error("total mass {mass:e} is below the underflow floor")]
    ZeroMass { mass: f64 },

    #[error("explicit step dt = {dt:e} violates stability bound {bound:e}")]
    StabilityViolation { dt: f64, bound: f64 },

    #[error("unsupported scheme: {0}")]
    UnsupportedScheme(String),

    #[error("Brownian bridge over non-positive time span {0}")]
    DegenerateBridge(f64),

    #[error("Yau spec does not reproduce the model drift (max deviation {deviation:e})")]
    SpecMismatch { deviation: f64 },

    #[error("transformed support reaches the grid boundary (boundary/peak ratio {ratio:e})")]
    SupportEscape { ratio: f64 },

    #[error("covariance lost positive definiteness at interval {interval}")]
    NonPsd { interval: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by malformed input rather than numerical breakdown.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter { .. }
                | Error::DimensionMismatch { .. }
                | Error::InvalidGrid(_)
                | Error::GridMismatch
                | Error::TimeMismatch(_)
                | Error::AsymmetricL { .. }
                | Error::SpecMismatch { .. }
                | Error::UnsupportedScheme(_)
                | Error::Config(_)
                | Error::Json(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
