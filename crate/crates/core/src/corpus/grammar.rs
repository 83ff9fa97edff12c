use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;

use super::{number_to_words, CorpusError};

const BUNDLED_GRAMMAR: &str = include_str!("../../data/grammar.txt");

/// Slot name expanded to a spoken-form integer instead of a filler list.
pub const NUMBER_SLOT: &str = "number";

#[derive(Debug, Clone, PartialEq, Eq)]
enum Piece {
    Word(String),
    Slot(String),
}

/// Utterance templates with `{slot}` placeholders and per-slot filler lists.
#[derive(Debug, Clone)]
pub struct Grammar {
    patterns: Vec<Vec<Piece>>,
    slots: BTreeMap<String, Vec<String>>,
}

impl Grammar {
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_GRAMMAR).expect("bundled grammar is valid")
    }

    /// Sections are `[patterns]` and `[slot NAME]`; `#` starts a comment line.
    pub fn parse(text: &str) -> Result<Self, CorpusError> {
        enum Section {
            None,
            Patterns,
            Slot(String),
        }
        let mut section = Section::None;
        let mut patterns = Vec::new();
        let mut slots: BTreeMap<String, Vec<String>> = BTreeMap::new();
        let mut refs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let err = |msg: String| CorpusError::Parse { line: i + 1, msg };
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(header) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = match header.split_whitespace().collect::<Vec<_>>()[..] {
                    ["patterns"] => Section::Patterns,
                    ["slot", name] => {
                        slots.entry(name.to_string()).or_default();
                        Section::Slot(name.to_string())
                    }
                    _ => return Err(err(format!("unknown section [{header}]"))),
                };
                continue;
            }
            match &section {
                Section::None => return Err(err("line outside any section".into())),
                Section::Patterns => {
                    let mut pieces = Vec::new();
                    for w in line.split_whitespace() {
                        match w.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
                            Some(name) => {
                                refs.push((i + 1, name.to_string()));
                                pieces.push(Piece::Slot(name.to_string()));
                            }
                            None => pieces.push(Piece::Word(w.to_lowercase())),
                        }
                    }
                    patterns.push(pieces);
                }
                Section::Slot(name) => {
                    slots.get_mut(name).expect("slot section registered").push(super::normalize_text(line));
                }
            }
        }
        for (line, name) in refs {
            if name != NUMBER_SLOT && slots.get(&name).is_none_or(|f| f.is_empty()) {
                return Err(CorpusError::Parse { line, msg: format!("slot {{{name}}} has no fillers") });
            }
        }
        if patterns.is_empty() {
            return Err(CorpusError::Parse { line: 0, msg: "grammar has no patterns".into() });
        }
        Ok(Self { patterns, slots })
    }

    pub fn num_patterns(&self) -> usize {
        self.patterns.len()
    }

    /// Uniform pattern, then uniform filler per slot; numbers in `1..=max_number`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, max_number: u64) -> String {
        let pattern = &self.patterns[rng.random_range(0..self.patterns.len())];
        let mut words: Vec<String> = Vec::new();
        for piece in pattern {
            match piece {
                Piece::Word(w) => words.push(w.clone()),
                Piece::Slot(name) if name == NUMBER_SLOT => {
                    words.push(number_to_words(rng.random_range(1..=max_number.max(1))))
                }
                Piece::Slot(name) => {
                    let fillers = &self.slots[name];
                    words.push(fillers[rng.random_range(0..fillers.len())].clone());
                }
            }
        }
        words.join(" ")
    }

    /// Every word the grammar can emit with numbers up to `max_number`.
    pub fn words(&self, max_number: u64) -> BTreeSet<String> {
        let mut out = BTreeSet::new();
        for p in &self.patterns {
            for piece in p {
                if let Piece::Word(w) = piece {
                    out.insert(w.clone());
                }
            }
        }
        for fillers in self.slots.values() {
            for f in fillers {
                out.extend(f.split_whitespace().map(str::to_string));
            }
        }
        for n in 1..=max_number {
            out.extend(number_to_words(n).split(' ').map(str::to_string));
        }
        out
    }
}
