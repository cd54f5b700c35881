use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid network spec: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("action {action} outside bounds [{lo}, {hi}]")]
    ActionOutOfBounds { action: f64, lo: f64, hi: f64 },
    #[error("disturbance {xi} outside support [{lo}, {hi}]")]
    NoiseOutOfSupport { xi: f64, lo: f64, hi: f64 },
    #[error("empty range for {0}")]
    EmptyRange(&'static str),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("horizon mismatch: batch has {batch} steps, config expects {config}")]
    Horizon { batch: usize, config: usize },
    #[error("numerical divergence at iteration {iteration}: {what}")]
    Divergence { iteration: usize, what: String },
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
