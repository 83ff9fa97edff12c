//! Seeded generator of (corrupted request, clean rewrite) pairs.
//!
//! Rewrites are sampled from a template [`Grammar`]. Each request is the
//! rewrite with at most one corruption applied, chosen from a configurable
//! distribution. Phonetic corruptions draw replacements from confusion lists
//! precomputed over the lexicon.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{CorpusError, Grammar, PairExample};
use crate::phonetics::{normalized_levenshtein, PronunciationLexicon};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Corruption {
    None,
    Homophone,
    NearPhoneme,
    SemanticDrop,
    SemanticDup,
}

impl Corruption {
    pub const ALL: [Corruption; 5] =
        [Self::None, Self::Homophone, Self::NearPhoneme, Self::SemanticDrop, Self::SemanticDup];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Homophone => "homophone",
            Self::NearPhoneme => "near-phoneme",
            Self::SemanticDrop => "semantic-drop",
            Self::SemanticDup => "semantic-dup",
        }
    }

    pub fn parse(tag: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.as_str() == tag)
    }

    /// Homophone and near-phoneme substitutions.
    pub fn is_phonetic(self) -> bool {
        matches!(self, Self::Homophone | Self::NearPhoneme)
    }
}

/// Relative weights of each corruption; they need not sum to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionWeights {
    pub none: f64,
    pub homophone: f64,
    pub near_phoneme: f64,
    pub semantic_drop: f64,
    pub semantic_dup: f64,
}

impl Default for CorruptionWeights {
    fn default() -> Self {
        Self { none: 0.1, homophone: 0.35, near_phoneme: 0.35, semantic_drop: 0.1, semantic_dup: 0.1 }
    }
}

impl CorruptionWeights {
    fn as_array(&self) -> [f64; 5] {
        [self.none, self.homophone, self.near_phoneme, self.semantic_drop, self.semantic_dup]
    }

    pub fn only(c: Corruption) -> Self {
        let mut w = [0.0; 5];
        w[Corruption::ALL.iter().position(|&x| x == c).unwrap()] = 1.0;
        Self { none: w[0], homophone: w[1], near_phoneme: w[2], semantic_drop: w[3], semantic_dup: w[4] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub weights: CorruptionWeights,
    /// Confusion-list cap per word, for both homophones and near neighbours.
    pub max_neighbors: usize,
    /// Upper bound for `{number}` slots.
    pub max_number: u64,
    /// Phonetic corruptions must stay within this normalized phoneme distance.
    pub max_phonetic_distance: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self { weights: CorruptionWeights::default(), max_neighbors: 3, max_number: 120, max_phonetic_distance: 0.3 }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let w = self.weights.as_array();
        if w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
            return Err(CorpusError::InvalidArgument(
                "synthetic.weights must be non-negative with a positive sum".into(),
            ));
        }
        if self.max_neighbors == 0 {
            return Err(CorpusError::InvalidArgument("synthetic.max_neighbors must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.max_phonetic_distance) {
            return Err(CorpusError::InvalidArgument("synthetic.max_phonetic_distance must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// How often a requested corruption could not be applied and fell back.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GenerationReport {
    pub homophone_to_near_phoneme: usize,
    pub near_phoneme_to_drop: usize,
    pub drop_to_dup: usize,
    pub per_tag: BTreeMap<String, usize>,
}

impl GenerationReport {
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.homophone_to_near_phoneme > 0 {
            out.push(format!(
                "{} homophone substitutions fell back to near-phoneme (no homophone in lexicon)",
                self.homophone_to_near_phoneme
            ));
        }
        if self.near_phoneme_to_drop > 0 {
            out.push(format!(
                "{} near-phoneme substitutions fell back to word drop (no neighbour within distance)",
                self.near_phoneme_to_drop
            ));
        }
        if self.drop_to_dup > 0 {
            out.push(format!("{} word drops fell back to duplication (single-word utterance)", self.drop_to_dup));
        }
        out
    }
}

#[derive(Debug, Default)]
struct Confusions {
    homophones: Vec<String>,
    near: Vec<String>,
}

/// Iterator over synthetic pairs; a pure function of (seed, config, grammar, lexicon).
pub struct SyntheticGenerator<'a> {
    rng: ChaCha8Rng,
    grammar: &'a Grammar,
    lexicon: &'a PronunciationLexicon,
    config: SyntheticConfig,
    table: BTreeMap<String, Confusions>,
    remaining: usize,
    report: GenerationReport,
}

impl<'a> SyntheticGenerator<'a> {
    pub fn new(
        seed: u64,
        n_pairs: usize,
        config: SyntheticConfig,
        grammar: &'a Grammar,
        lexicon: &'a PronunciationLexicon,
    ) -> Result<Self, CorpusError> {
        if n_pairs < 1 {
            return Err(CorpusError::InvalidArgument("n_pairs must be at least 1".into()));
        }
        config.validate()?;
        let cap = config.max_neighbors;
        let usable = |w: &&str| w.chars().all(|c| c.is_ascii_lowercase());
        let table = grammar
            .words(config.max_number)
            .into_iter()
            .map(|w| {
                let homophones: Vec<String> =
                    lexicon.homophones(&w).into_iter().filter(usable).take(cap).map(str::to_string).collect();
                let near: Vec<String> =
                    lexicon.phoneme_neighbors(&w, 1).into_iter().filter(usable).take(cap).map(str::to_string).collect();
                (w, Confusions { homophones, near })
            })
            .collect();
        Ok(Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            grammar,
            lexicon,
            config,
            table,
            remaining: n_pairs,
            report: GenerationReport::default(),
        })
    }

    pub fn report(&self) -> &GenerationReport {
        &self.report
    }

    fn pick_kind(&mut self) -> Corruption {
        let w = self.config.weights.as_array();
        let total: f64 = w.iter().sum();
        let mut u = self.rng.random::<f64>() * total;
        for (c, wi) in Corruption::ALL.into_iter().zip(w) {
            if u < wi {
                return c;
            }
            u -= wi;
        }
        // Rounding left u at the top edge: take the last non-zero weight.
        Corruption::ALL.into_iter().zip(w).rev().find(|(_, wi)| *wi > 0.0).map(|(c, _)| c).unwrap()
    }

    fn substitute(&mut self, words: &[String], homophone: bool) -> Option<Vec<String>> {
        let source = words.join(" ");
        let source_ph = self.lexicon.g2p(&source);
        let mut positions: Vec<usize> = (0..words.len())
            .filter(|&i| {
                self.table.get(&words[i]).is_some_and(|c| !(if homophone { &c.homophones } else { &c.near }).is_empty())
            })
            .collect();
        positions.shuffle(&mut self.rng);
        for i in positions {
            let c = &self.table[&words[i]];
            let list = if homophone { &c.homophones } else { &c.near };
            let mut order: Vec<usize> = (0..list.len()).collect();
            order.shuffle(&mut self.rng);
            for j in order {
                let mut out = words.to_vec();
                out[i] = list[j].clone();
                let d = normalized_levenshtein(self.lexicon.g2p(&out.join(" ")).as_slice(), source_ph.as_slice());
                if d <= self.config.max_phonetic_distance {
                    return Some(out);
                }
            }
        }
        None
    }

    fn corrupt(&mut self, words: &[String], kind: Corruption) -> (Vec<String>, Corruption) {
        match kind {
            Corruption::None => (words.to_vec(), kind),
            Corruption::Homophone => match self.substitute(words, true) {
                Some(out) => (out, kind),
                None => {
                    self.report.homophone_to_near_phoneme += 1;
                    self.corrupt(words, Corruption::NearPhoneme)
                }
            },
            Corruption::NearPhoneme => match self.substitute(words, false) {
                Some(out) => (out, kind),
                None => {
                    self.report.near_phoneme_to_drop += 1;
                    self.corrupt(words, Corruption::SemanticDrop)
                }
            },
            Corruption::SemanticDrop if words.len() < 2 => {
                self.report.drop_to_dup += 1;
                self.corrupt(words, Corruption::SemanticDup)
            }
            Corruption::SemanticDrop => {
                let mut out = words.to_vec();
                out.remove(self.rng.random_range(0..words.len()));
                (out, kind)
            }
            Corruption::SemanticDup => {
                let mut out = words.to_vec();
                let i = self.rng.random_range(0..words.len());
                out.insert(i, words[i].clone());
                (out, kind)
            }
        }
    }
}

impl Iterator for SyntheticGenerator<'_> {
    type Item = PairExample;

    fn next(&mut self) -> Option<PairExample> {
        if self.remaining == 0 {
            return None;
        }
        self.remaining -= 1;
        let rewrite = self.grammar.sample(&mut self.rng, self.config.max_number);
        let words: Vec<String> = rewrite.split(' ').map(str::to_string).collect();
        let kind = self.pick_kind();
        let (request, applied) = self.corrupt(&words, kind);
        *self.report.per_tag.entry(applied.as_str().to_string()).or_default() += 1;
        Some(
            PairExample::new(&request.join(" "), &rewrite, Some(applied.as_str()))
                .expect("grammar utterances are non-empty"),
        )
    }
}

/// Collects `n_pairs` pairs from the bundled grammar and logs fallback warnings.
pub fn generate_synthetic_corpus(
    seed: u64,
    n_pairs: usize,
    lexicon: &PronunciationLexicon,
    config: &SyntheticConfig,
) -> Result<(Vec<PairExample>, GenerationReport), CorpusError> {
    let grammar = Grammar::bundled();
    let mut generator = SyntheticGenerator::new(seed, n_pairs, config.clone(), &grammar, lexicon)?;
    let pairs: Vec<PairExample> = generator.by_ref().collect();
    let report = generator.report().clone();
    for w in report.warnings() {
        log::warn!("{w}");
    }
    Ok((pairs, report))
}
