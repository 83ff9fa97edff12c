//! Reward-guided sequence-to-sequence data augmentation for query rewriting.
//!
//! The crate learns the inverse rewriting map (clean rewrite to corrupted
//! request) with a small Transformer, fine-tunes it with self-critical
//! policy gradients against phonetic and semantic rewards, and measures
//! whether the synthetic pairs it produces help a dense retriever.

pub mod augmenter;
pub mod autodiff;
pub mod corpus;
pub mod phonetics;
pub mod pipeline;
pub mod retrieval;
pub mod rewards;
pub mod scst;
pub mod seq2seq;
