use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem spec: {0}")]
    InvalidSpec(String),

    #[error("value {value} outside [{lo}, {hi}]")]
    OutOfRange { value: f64, lo: f64, hi: f64 },

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("action truncation at radius {0} is empty")]
    EmptyTruncation(f64),

    #[error("invalid weights: {0}")]
    InvalidWeights(String),

    #[error("noise stream too short: need {needed}, have {available}")]
    InsufficientNoise { needed: usize, available: usize },

    #[error("information prefix reaches step {prefix} but policy evaluated at step {step}")]
    Anticipation { prefix: usize, step: usize },

    #[error("numerical blowup at step {step}")]
    NumericalBlowup { step: usize },

    #[error("unsupported mode: {0}")]
    UnsupportedMode(String),

    #[error("budget {budget} smaller than population {population}")]
    InvalidBudget { budget: usize, population: usize },

    #[error("Riccati solution blows up at t = {t}")]
    OracleBlowup { t: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
