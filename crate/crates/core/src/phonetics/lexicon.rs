use std::collections::BTreeMap;
use std::path::Path;

use super::{edit_distance, PhonemeSequence, PhoneticsError};
use crate::corpus::number_to_words;

const BUNDLED_LEXICON: &str = include_str!("../../data/lexicon.tsv");
const BUNDLED_RULES: &str = include_str!("../../data/letter_rules.tsv");

/// Ordered letter-to-sound rules. At each position the longest matching
/// pattern wins, earlier lines breaking ties between equal lengths.
#[derive(Debug, Clone)]
pub struct LetterRules {
    rules: Vec<(String, PhonemeSequence)>,
}

impl LetterRules {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_RULES).expect("bundled rule table is valid")
    }

    pub fn parse(text: &str) -> Result<Self, PhoneticsError> {
        let mut rules = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with(";;;") {
                continue;
            }
            let (pattern, phones) = line.split_once('\t').unwrap_or((line, ""));
            let pattern = pattern.trim().to_lowercase();
            if pattern.is_empty() {
                return Err(PhoneticsError::Parse { line: i + 1, msg: "empty pattern".into() });
            }
            let phones = phones.parse().map_err(|e| PhoneticsError::Parse { line: i + 1, msg: format!("{e}") })?;
            rules.push((pattern, phones));
        }
        // Stable sort keeps file order among equal lengths.
        rules.sort_by_key(|(p, _)| std::cmp::Reverse(p.len()));
        Ok(Self { rules })
    }

    /// Characters no rule covers (digits, punctuation) are skipped.
    pub fn apply(&self, word: &str) -> PhonemeSequence {
        let word = word.to_lowercase();
        let mut out = PhonemeSequence::default();
        let mut rest = word.as_str();
        while let Some(c) = rest.chars().next() {
            match self.rules.iter().find(|(p, _)| rest.starts_with(p.as_str())) {
                Some((p, phones)) => {
                    out.extend_from(phones);
                    rest = &rest[p.len()..];
                }
                None => rest = &rest[c.len_utf8()..],
            }
        }
        out
    }
}

/// Word → single pronunciation, plus the rule table used for everything else.
#[derive(Debug, Clone)]
pub struct PronunciationLexicon {
    entries: BTreeMap<String, PhonemeSequence>,
    rules: LetterRules,
}

impl PronunciationLexicon {
    /// The bundled ~4k-word lexicon with the bundled rule table.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_LEXICON).expect("bundled lexicon is valid")
    }

    /// Reads `word<TAB>PH1 PH2 ...` lines (whitespace after the word is also
    /// accepted, so a raw CMUdict file loads unchanged). Stress digits are
    /// stripped and only the first variant of a word is kept.
    pub fn parse(text: &str) -> Result<Self, PhoneticsError> {
        let mut entries = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split(" #").next().unwrap_or_default().trim();
            if line.is_empty() || line.starts_with(";;;") {
                continue;
            }
            let err = |msg: String| PhoneticsError::Parse { line: i + 1, msg };
            let (word, phones) = match line.split_once('\t') {
                Some(split) => split,
                None => line.split_once(char::is_whitespace).ok_or_else(|| err("missing pronunciation".into()))?,
            };
            let word = word.trim().to_lowercase();
            let word = match word.strip_suffix(')').and_then(|w| w.rsplit_once('(')) {
                Some((base, _variant)) => base.to_string(),
                None => word,
            };
            let phones: PhonemeSequence = phones.parse().map_err(|e| err(format!("{e}")))?;
            if phones.is_empty() {
                return Err(err(format!("empty pronunciation for {word:?}")));
            }
            entries.entry(word).or_insert(phones);
        }
        Ok(Self { entries, rules: LetterRules::bundled() })
    }

    pub fn from_file(path: &Path) -> Result<Self, PhoneticsError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn with_rules(mut self, rules: LetterRules) -> Self {
        self.rules = rules;
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn lookup(&self, word: &str) -> Option<&PhonemeSequence> {
        self.entries.get(word)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &PhonemeSequence)> {
        self.entries.iter().map(|(w, p)| (w.as_str(), p))
    }

    /// Lexicon entry, else spoken digits, else the rule table.
    pub fn pronounce(&self, word: &str) -> PhonemeSequence {
        let word = word.to_lowercase();
        if let Some(p) = self.entries.get(&word) {
            return p.clone();
        }
        if !word.is_empty() && word.bytes().all(|b| b.is_ascii_digit()) {
            if let Ok(n) = word.parse::<u64>() {
                return self.g2p(&number_to_words(n));
            }
        }
        self.rules.apply(&word)
    }

    /// Concatenated pronunciation of whitespace-separated words. Reserved
    /// markers such as `<unk>` contribute nothing.
    pub fn g2p(&self, utterance: &str) -> PhonemeSequence {
        let mut out = PhonemeSequence::default();
        for w in utterance.split_whitespace() {
            if w.starts_with('<') && w.ends_with('>') {
                continue;
            }
            out.extend_from(&self.pronounce(w));
        }
        out
    }

    /// Other lexicon words with exactly the same pronunciation, closest
    /// spelling length first, then alphabetical.
    pub fn homophones(&self, word: &str) -> Vec<&str> {
        let target = self.pronounce(word);
        self.ranked(word, |p| p == &target)
    }

    /// Lexicon words whose pronunciation is exactly `distance` phoneme edits
    /// away, ordered like [`homophones`](Self::homophones).
    pub fn phoneme_neighbors(&self, word: &str, distance: usize) -> Vec<&str> {
        let target = self.pronounce(word);
        self.ranked(word, |p| {
            p.len().abs_diff(target.len()) <= distance && edit_distance(p.as_slice(), target.as_slice()) == distance
        })
    }

    fn ranked(&self, word: &str, keep: impl Fn(&PhonemeSequence) -> bool) -> Vec<&str> {
        let word = word.to_lowercase();
        let mut out: Vec<&str> =
            self.entries.iter().filter(|(w, p)| **w != word && keep(p)).map(|(w, _)| w.as_str()).collect();
        out.sort_by_key(|w| (w.len().abs_diff(word.len()), *w));
        out
    }
}
