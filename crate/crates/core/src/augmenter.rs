//! Synthetic pair generation from a trained rewrite-to-request model, and
//! merging of synthetic pairs into an original training set.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Scalar;
use crate::corpus::{normalize_text, CorpusError, PairExample, TokenId, TokenSequence, Vocabulary};
use crate::phonetics::{phonetic_reward, PronunciationLexicon};
use crate::rewards::{score_pair, RewardError, SemanticEncoder};
use crate::seq2seq::{DecodeResult, Seq2SeqError, Seq2SeqModel};

const DECODE_CHUNK: usize = 64;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("{0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Seq2Seq(#[from] Seq2SeqError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Greedy,
    Beam,
    Sample,
}

impl DecodeMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Greedy => "greedy",
            Self::Beam => "beam",
            Self::Sample => "sample",
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DecodeMode {
    type Err = AugmentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "beam" => Ok(Self::Beam),
            "sample" => Ok(Self::Sample),
            other => Err(AugmentError::InvalidConfig(format!("unknown decode mode {other:?}; expected greedy, beam or sample"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub mode: DecodeMode,
    pub n_per_input: usize,
    pub beam_width: usize,
    pub length_penalty: f64,
    pub temperature: f64,
    pub seed: u64,
    /// Drop outputs identical to their input.
    pub drop_copies: bool,
    /// Optional phonetic-reward window; pairs outside it are dropped.
    pub min_r_p: Option<f64>,
    pub max_r_p: Option<f64>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Greedy,
            n_per_input: 1,
            beam_width: 4,
            length_penalty: 1.0,
            temperature: 1.0,
            seed: 0,
            drop_copies: true,
            min_r_p: None,
            max_r_p: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |msg: String| Err(AugmentError::InvalidConfig(msg));
        if self.n_per_input == 0 {
            return bad("n_per_input must be at least 1".into());
        }
        if self.n_per_input > 1 && self.mode != DecodeMode::Sample {
            return bad(format!("n_per_input {} needs sample mode, got {}", self.n_per_input, self.mode));
        }
        if self.mode == DecodeMode::Beam && self.beam_width == 0 {
            return bad("beam_width must be positive".into());
        }
        if self.mode == DecodeMode::Sample && !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        Ok(())
    }

    fn thresholds(&self) -> bool {
        self.min_r_p.is_some() || self.max_r_p.is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct AugmentReport {
    pub inputs: usize,
    pub candidates: usize,
    pub copies_dropped: usize,
    pub empty_dropped: usize,
    pub duplicates_dropped: usize,
    pub threshold_dropped: usize,
    pub emitted: usize,
}

/// Scorers attached to generated pairs as metadata.
#[derive(Clone, Copy, Default)]
pub struct PairScorers<'a, T: Scalar = f32> {
    pub lexicon: Option<&'a PronunciationLexicon>,
    pub encoder: Option<&'a SemanticEncoder<T>>,
}

/// Decodes `n_per_input` candidate requests for every rewrite and keeps
/// the non-empty, non-copy, per-input distinct ones. Output order is input
/// order, then candidate order.
pub fn augment<T: Scalar, E: Scalar>(
    model: &Seq2SeqModel<T>,
    vocab: &Vocabulary,
    rewrites: &[String],
    config: &AugmentConfig,
    scorers: PairScorers<'_, E>,
) -> Result<(Vec<PairExample>, AugmentReport), AugmentError> {
    config.validate()?;
    if config.thresholds() && scorers.lexicon.is_none() {
        return Err(AugmentError::InvalidConfig("phonetic thresholds need a lexicon".into()));
    }
    let max_len = model.config().max_len;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut report = AugmentReport { inputs: rewrites.len(), ..AugmentReport::default() };
    let mut out = Vec::new();
    for chunk in rewrites.chunks(DECODE_CHUNK) {
        let texts: Vec<String> = chunk.iter().map(|r| normalize_text(r)).collect();
        let seqs: Vec<TokenSequence> = texts.iter().map(|t| vocab.encode(t, max_len)).collect::<Result<_, _>>()?;
        let decoded = decode(model, &seqs, config, &mut rng)?;
        let n = config.n_per_input;
        for (i, rewrite) in texts.iter().enumerate() {
            let mut seen = HashSet::new();
            for d in &decoded[i * n..(i + 1) * n] {
                report.candidates += 1;
                let request = vocab.decode(&d.tokens);
                if request.is_empty() {
                    report.empty_dropped += 1;
                    continue;
                }
                if config.drop_copies && &request == rewrite {
                    report.copies_dropped += 1;
                    continue;
                }
                if !seen.insert(request.clone()) {
                    report.duplicates_dropped += 1;
                    continue;
                }
                let mut pair = PairExample::new(&request, rewrite, None)?;
                pair.mode = Some(config.mode.to_string());
                if let Some(lex) = scorers.lexicon {
                    match scorers.encoder {
                        Some(enc) => {
                            let s = score_pair(&pair.request, &pair.rewrite, lex, enc)?;
                            (pair.r_p, pair.r_d) = (Some(s.r_p), Some(s.r_d));
                        }
                        None => pair.r_p = Some(phonetic_reward(&pair.request, &pair.rewrite, lex)),
                    }
                }
                let r_p = pair.r_p.unwrap_or(0.0);
                if config.min_r_p.is_some_and(|lo| r_p < lo) || config.max_r_p.is_some_and(|hi| r_p > hi) {
                    report.threshold_dropped += 1;
                    continue;
                }
                out.push(pair);
            }
        }
    }
    report.emitted = out.len();
    log::info!(
        "augment: {} inputs, {} candidates, {} emitted ({} copies, {} empty, {} duplicates dropped)",
        report.inputs,
        report.candidates,
        report.emitted,
        report.copies_dropped,
        report.empty_dropped,
        report.duplicates_dropped
    );
    Ok((out, report))
}

fn decode<T: Scalar>(
    model: &Seq2SeqModel<T>,
    seqs: &[TokenSequence],
    config: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<DecodeResult>, Seq2SeqError> {
    let ids: Vec<&[TokenId]> = seqs.iter().map(|s| s.ids.as_slice()).collect();
    match config.mode {
        DecodeMode::Greedy => model.decode_greedy_batch(&ids),
        DecodeMode::Sample => model.decode_sample_batch(&ids, config.n_per_input, config.temperature, rng),
        DecodeMode::Beam => seqs.iter().map(|s| model.decode_beam(s, config.beam_width, config.length_penalty)).collect(),
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct MergeReport {
    pub original: usize,
    pub synthetic: usize,
    pub duplicates: usize,
    pub size: usize,
}

/// Concatenates both sets and removes exact (request, rewrite) duplicates,
/// keeping each pair's first occurrence.
pub fn merge_training_sets(original: &[PairExample], synthetic: &[PairExample]) -> (Vec<PairExample>, MergeReport) {
    let mut seen: HashSet<(&str, &str)> = HashSet::new();
    let mut out = Vec::with_capacity(original.len() + synthetic.len());
    for p in original.iter().chain(synthetic) {
        if seen.insert(p.key()) {
            out.push(p.clone());
        }
    }
    let report = MergeReport {
        original: original.len(),
        synthetic: synthetic.len(),
        duplicates: original.len() + synthetic.len() - out.len(),
        size: out.len(),
    };
    log::info!("merge: {} + {} pairs, {} duplicates, {} kept", report.original, report.synthetic, report.duplicates, report.size);
    (out, report)
}
