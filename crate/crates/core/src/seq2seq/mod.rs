//! Transformer encoder-decoder: teacher-forced training and decoding.

mod batch;
mod config;
mod decode;
mod model;
mod train;

pub use batch::{bucket_batches, Batch};
pub use config::{ModelConfig, TrainConfig};
pub use decode::{beam_search, greedy_search, log_softmax, DecodeResult, ModelScorer, StepScorer, GREEDY_TEMPERATURE};
pub use model::{Memory, Seq2SeqModel};
pub use train::{
    encode_inverse_pairs, evaluate_loss, make_batch, mle_gradients, train_mle, BatchStream, EncodedPair, TrainRecord,
    TrainSummary,
};

use thiserror::Error;

use crate::autodiff::AutodiffError;
use crate::corpus::CorpusError;

#[derive(Debug, Error)]
pub enum Seq2SeqError {
    #[error("{which} length {len} outside 1..={max}")]
    Length { which: &'static str, len: usize, max: usize },
    #[error("{0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss or gradient at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}
