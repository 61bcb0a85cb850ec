//! Attentional graph matcher: alternating self/cross attention over two
//! keypoint sets, dustbin-augmented optimal transport, match supervision and
//! the two-stage training loop.

mod attention;
pub mod checkpoint;
mod loss;
mod model;
mod sinkhorn;
mod train;

pub use attention::{GnnLayer, MultiHeadAttention};
pub use loss::{assignment_loss, log_assignment_loss};
pub use model::{batch_loss, gradients, is_self_layer, MatcherConfig, MatcherWeights, PairCache, TrainSample};
pub use sinkhorn::{extract_matches, sinkhorn, sinkhorn_backward, sinkhorn_traced, Assignment, Match, SinkhornTrace};
pub use train::{
    learning_rate_at, train, train_with_progress, Adam, SignalMode, Stage, TrainConfig, TrainLogEntry, TrainOutcome,
};

use thiserror::Error;

use crate::encoding::EncodingError;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatcherError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("score matrix contains non-finite values")]
    NonFiniteScores,
    #[error("pair has no supervised cells")]
    EmptySupervision,
    #[error("non-finite loss {0}")]
    NonFiniteLoss(f64),
    #[error("non-finite gradient in {0}")]
    NonFiniteGradient(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("stage finetune3d requires a stage-1 checkpoint")]
    MissingCheckpoint,
    #[error("training aborted at iteration {iteration}: {source}")]
    TrainingAborted { iteration: usize, source: Box<MatcherError> },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Encoding(#[from] EncodingError),
}

#[cfg(test)]
mod tests;
