//! Phonetic, semantic-dissimilarity and combined rewards in `[0, 1]`, and
//! the mean-pool sentence encoder the semantic reward relies on.

mod encoder;

pub use encoder::{
    contrastive_batches, cosine, train_semantic_encoder, EncoderConfig, EncoderRecord, SemanticEncoder,
};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Scalar};
use crate::corpus::{split_words, TokenSequence};
use crate::phonetics::{phonetic_reward, PronunciationLexicon};

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("empty utterance")]
    EmptyUtterance,
    #[error("alpha must lie in [0, 1], got {0}")]
    InvalidAlpha(f64),
    #[error("{0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("non-finite loss or gradient at step {step}")]
    NonFinite { step: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// `clamp(1 - cos(u, r), 0, 1)` between two encoded utterances.
pub fn semantic_dissimilarity<T: Scalar>(
    candidate: &TokenSequence,
    source: &TokenSequence,
    encoder: &SemanticEncoder<T>,
) -> Result<f64, RewardError> {
    let e = encoder.embed_ids(&[candidate.content(), source.content()])?;
    Ok(dissimilarity_from_embeddings(&e[0], &e[1]))
}

pub fn dissimilarity_from_embeddings(u: &[f64], r: &[f64]) -> f64 {
    (1.0 - cosine(u, r)).clamp(0.0, 1.0)
}

pub fn check_alpha(alpha: f64) -> Result<f64, RewardError> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(alpha)
    } else {
        Err(RewardError::InvalidAlpha(alpha))
    }
}

/// `alpha * r_p + (1 - alpha) * r_d` on surface strings.
pub fn combined_reward<T: Scalar>(
    candidate: &str,
    source: &str,
    alpha: f64,
    lexicon: &PronunciationLexicon,
    encoder: &SemanticEncoder<T>,
) -> Result<f64, RewardError> {
    let alpha = check_alpha(alpha)?;
    let s = score_pair(candidate, source, lexicon, encoder)?;
    Ok(blend(alpha, s.r_p, s.r_d))
}

fn blend(alpha: f64, r_p: f64, r_d: f64) -> f64 {
    alpha * r_p + (1.0 - alpha) * r_d
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardKind {
    Phonetic,
    Semantic,
    Combined,
}

impl RewardKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Phonetic => "phonetic",
            Self::Semantic => "semantic",
            Self::Combined => "combined",
        }
    }

    pub fn needs_encoder(self) -> bool {
        self != Self::Phonetic
    }
}

impl fmt::Display for RewardKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RewardKind {
    type Err = RewardError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "phonetic" => Ok(Self::Phonetic),
            "semantic" => Ok(Self::Semantic),
            "combined" => Ok(Self::Combined),
            other => Err(RewardError::InvalidConfig(format!("unknown reward {other:?}; expected phonetic, semantic or combined"))),
        }
    }
}

/// Every reward of one (candidate, source) pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RewardScores {
    pub r_p: f64,
    pub r_d: f64,
}

impl RewardScores {
    pub fn combined(&self, alpha: f64) -> f64 {
        blend(alpha, self.r_p, self.r_d)
    }
}

pub fn score_pair<T: Scalar>(
    candidate: &str,
    source: &str,
    lexicon: &PronunciationLexicon,
    encoder: &SemanticEncoder<T>,
) -> Result<RewardScores, RewardError> {
    let r_p = phonetic_score(candidate, source, lexicon)?;
    let (c, s) = (encoder.tokenize(candidate)?, encoder.tokenize(source)?);
    Ok(RewardScores { r_p, r_d: semantic_dissimilarity(&c, &s, encoder)? })
}

fn phonetic_score(candidate: &str, source: &str, lexicon: &PronunciationLexicon) -> Result<f64, RewardError> {
    let (c, s) = (split_words(candidate), split_words(source));
    if c.is_empty() || s.is_empty() {
        return Err(RewardError::EmptyUtterance);
    }
    Ok(phonetic_reward(&c.join(" "), &s.join(" "), lexicon))
}

/// A reward chosen at configuration time, evaluated on surface strings.
///
/// Both arguments are re-tokenised, so the reward sees exactly the words
/// a generator emitted. Empty utterances are rejected for every kind.
#[derive(Debug, Clone, Copy)]
pub struct RewardFn<'a, T: Scalar = f32> {
    kind: RewardKind,
    alpha: f64,
    lexicon: &'a PronunciationLexicon,
    encoder: Option<&'a SemanticEncoder<T>>,
}

impl<'a, T: Scalar> RewardFn<'a, T> {
    pub fn phonetic(lexicon: &'a PronunciationLexicon) -> Self {
        Self { kind: RewardKind::Phonetic, alpha: 1.0, lexicon, encoder: None }
    }

    pub fn semantic(lexicon: &'a PronunciationLexicon, encoder: &'a SemanticEncoder<T>) -> Self {
        Self { kind: RewardKind::Semantic, alpha: 0.0, lexicon, encoder: Some(encoder) }
    }

    pub fn combined(alpha: f64, lexicon: &'a PronunciationLexicon, encoder: &'a SemanticEncoder<T>) -> Result<Self, RewardError> {
        Ok(Self { kind: RewardKind::Combined, alpha: check_alpha(alpha)?, lexicon, encoder: Some(encoder) })
    }

    /// Builds the reward named by `kind`; `alpha` is used only by the
    /// combined reward, and an encoder is required unless `kind` is phonetic.
    pub fn from_kind(
        kind: RewardKind,
        alpha: f64,
        lexicon: &'a PronunciationLexicon,
        encoder: Option<&'a SemanticEncoder<T>>,
    ) -> Result<Self, RewardError> {
        match (kind, encoder) {
            (RewardKind::Phonetic, _) => Ok(Self::phonetic(lexicon)),
            (RewardKind::Semantic, Some(e)) => Ok(Self::semantic(lexicon, e)),
            (RewardKind::Combined, Some(e)) => Self::combined(alpha, lexicon, e),
            (k, None) => Err(RewardError::InvalidConfig(format!("the {k} reward needs a semantic encoder"))),
        }
    }

    pub fn kind(&self) -> RewardKind {
        self.kind
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn score(&self, candidate: &str, source: &str) -> Result<f64, RewardError> {
        match (self.kind, self.encoder) {
            (RewardKind::Phonetic, _) => phonetic_score(candidate, source, self.lexicon),
            (RewardKind::Semantic, Some(e)) => {
                let (c, s) = (e.tokenize(candidate)?, e.tokenize(source)?);
                semantic_dissimilarity(&c, &s, e)
            }
            (RewardKind::Combined, Some(e)) => combined_reward(candidate, source, self.alpha, self.lexicon, e),
            (_, None) => unreachable!("constructors attach an encoder to encoder-based rewards"),
        }
    }
}
