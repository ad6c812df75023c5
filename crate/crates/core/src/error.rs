use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("trajectory needs at least {needed} points, got {got}")]
    TooFewPoints { needed: usize, got: usize },
    #[error("points {index} and {} coincide; zero-length steps are not allowed", index + 1)]
    DuplicateConsecutivePoints { index: usize },
    #[error("non-finite value in {what}")]
    NonFinite { what: &'static str },
    #[error("invalid {what}: {value}")]
    Domain { what: &'static str, value: f64 },
    #[error("{what} overflows at argument {argument}")]
    Overflow { what: &'static str, argument: f64 },
    #[error("invalid hidden Markov parameters: {0}")]
    InvalidHmm(String),
    #[error("natural parameters ({eta1}, {eta2}) are outside the gamma family (need eta1 > -1, eta2 > 0)")]
    InvalidNaturalParams { eta1: f64, eta2: f64 },
    #[error("dimension mismatch in {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("observed endpoint ({x}, {y}) at step {t} lies outside the landscape grid")]
    OutOfGrid { t: usize, x: f64, y: f64 },
    #[error("covariate formula needs a landscape: {0}")]
    MissingLandscape(String),
    #[error("unknown target '{0}'")]
    UnknownTarget(String),
    #[error("uniform control range M = {m} does not cover observed distance {max_distance}")]
    UniformRangeTooSmall { m: f64, max_distance: f64 },
    #[error("objective is unbounded: the data are separated along some coefficient direction")]
    Separation,
    #[error("coefficients are not identified: within-set covariate covariance is singular")]
    NotIdentified,
    #[error("emission row {t} is identically zero")]
    NumericalUnderflow { t: usize },
    #[error("all {attempts} EM runs failed; last error: {last}")]
    AllRunsFailed { attempts: usize, last: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
