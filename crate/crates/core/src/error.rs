use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in rollout {rollout} at step {step}")]
    Overflow { rollout: usize, step: usize },

    #[error("ill-conditioned {what}: condition number {cond:.3e} exceeds {limit:.0e}")]
    IllConditioned {
        what: &'static str,
        cond: f64,
        limit: f64,
    },

    #[error("rank deficiency: {0}")]
    RankDeficient(String),

    #[error("extraction failed: {0}")]
    Extraction(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for failures that come from the numerics rather than from the inputs.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::IllConditioned { .. } | Error::RankDeficient(_) | Error::Extraction(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
