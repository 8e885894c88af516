use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("target position coincides with AP position ({x}, {y})")]
    ZeroRange { x: f64, y: f64 },

    #[error("virtual angle {0} outside [-1, 1]")]
    InvalidAngle(f64),

    #[error("argument `{name}` must be positive, got {value}")]
    NonPositiveInput { name: &'static str, value: f64 },

    #[error("noise standard deviation must be positive, got {0}")]
    NonPositiveNoise(f64),

    #[error("model order {order} invalid for a {dim}-dimensional observation space")]
    InvalidModelOrder { order: usize, dim: usize },

    #[error("covariance carries no energy; signal/noise split undefined")]
    RankDeficient,

    #[error("only {found} of {requested} peaks could be extracted")]
    InsufficientPeaks { requested: usize, found: usize },

    #[error("Fisher information in position is singular (condition number {0:.3e})")]
    SingularGeometry(f64),

    #[error("length mismatch: {estimates} estimates vs {truths} truths")]
    LengthMismatch { estimates: usize, truths: usize },

    #[error("could not place {count} targets with {separation} m separation after {attempts} attempts")]
    PlacementFailure {
        count: usize,
        separation: f64,
        attempts: usize,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
