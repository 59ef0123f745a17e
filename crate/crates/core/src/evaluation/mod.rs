//! Rollout generation and the quantitative analyses run on rollouts and
//! data.

mod rollout;
mod stats;

pub use rollout::{
    count_generated_macros, macro_generation_distribution, nested_frames, rollout, validate_request, GroundingSpan, RolloutRequest,
    RolloutResult, DEFAULT_BURNIN, DEFAULT_HORIZON,
};
pub use stats::{
    bimodality_score, closest_neighbor_histogram, closest_neighbor_scores, domain_stats, histogram_l1, Bimodality, Bounds, Histogram,
    OobMode, StatsSummary, BIMODALITY_MIN_MASS,
};

use crate::models::ModelError;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    /// A request field is invalid; `pointer` is a JSON pointer into it.
    #[error("{pointer}: {message}")]
    Request { pointer: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

impl From<candle_core::Error> for EvalError {
    fn from(e: candle_core::Error) -> Self {
        EvalError::Model(ModelError::Tensor(e))
    }
}

pub type Result<T> = std::result::Result<T, EvalError>;
