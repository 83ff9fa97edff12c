//! Grapheme-to-phoneme conversion and phoneme-level edit distance.
//!
//! Pronunciations come from a bundled CMU-derived lexicon. Words it does not
//! cover fall back to a longest-match letter-to-sound rule table, so
//! [`PronunciationLexicon::g2p`] is total.

mod levenshtein;
mod lexicon;
mod symbols;

pub use levenshtein::{edit_distance, normalized_levenshtein};
pub use lexicon::{LetterRules, PronunciationLexicon};
pub use symbols::{Phoneme, PhonemeSequence, ARPABET};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PhoneticsError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("unknown phoneme symbol {0:?}")]
    UnknownSymbol(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Normalized phoneme edit distance between two utterances, in `[0, 1]`.
pub fn phonetic_reward(candidate: &str, source: &str, lexicon: &PronunciationLexicon) -> f64 {
    let a = lexicon.g2p(candidate);
    let b = lexicon.g2p(source);
    normalized_levenshtein(a.as_slice(), b.as_slice())
}
