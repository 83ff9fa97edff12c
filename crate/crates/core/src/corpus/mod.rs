//! Tokenization, vocabulary, JSON-lines datasets and the synthetic corpus.

mod dataset;
mod grammar;
mod numbers;
mod synth;
mod vocab;

pub use dataset::{parse_pairs, read_pairs, write_pairs, PairExample};
pub use grammar::{Grammar, NUMBER_SLOT};
pub use numbers::{normalize_spoken_form, number_to_words};
pub use synth::{
    generate_synthetic_corpus, Corruption, CorruptionWeights, GenerationReport, SyntheticConfig, SyntheticGenerator,
};
pub use vocab::{
    build_vocab, normalize_text, split_words, tokenize, TokenId, TokenSequence, Vocabulary, BOS, DEFAULT_MAX_LEN, EOS,
    PAD, RESERVED, UNK,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty or whitespace-only text")]
    EmptyText,
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("{0}")]
    InvalidArgument(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: field `{field}`: {msg}")]
    Field { line: usize, field: &'static str, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
