use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CorpusError, PairExample};

pub type TokenId = usize;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Model-facing length cap, EOS included.
pub const DEFAULT_MAX_LEN: usize = 25;

/// Lowercased whitespace tokens.
pub fn split_words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Lowercases and collapses runs of whitespace to single spaces.
pub fn normalize_text(text: &str) -> String {
    split_words(text).join(" ")
}

/// Token ids ending in EOS, plus the surface text they were built from.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub surface: String,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Ids without the trailing EOS.
    pub fn content(&self) -> &[TokenId] {
        match self.ids.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.ids,
        }
    }
}

/// Bijection between token strings and ids, ids 0..4 reserved.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Reserved tokens followed by `tokens` in the given order.
    pub fn from_tokens<I, S>(tokens: I) -> Result<Self, CorpusError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, TokenId> = all.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        for t in tokens {
            let t = t.into();
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(CorpusError::InvalidArgument(format!("invalid vocabulary token {t:?}")));
            }
            if index.contains_key(&t) {
                return Err(CorpusError::InvalidArgument(format!("duplicate vocabulary token {t:?}")));
            }
            index.insert(t.clone(), all.len());
            all.push(t);
        }
        Ok(Self { tokens: all, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Non-reserved tokens in id order.
    pub fn corpus_tokens(&self) -> &[String] {
        &self.tokens[RESERVED.len()..]
    }

    /// Lowercase, split on whitespace, map unknown words to UNK, keep at
    /// most `max_len - 1` words and append EOS.
    pub fn encode(&self, text: &str, max_len: usize) -> Result<TokenSequence, CorpusError> {
        if max_len < 2 {
            return Err(CorpusError::InvalidArgument(format!("max_len must be at least 2, got {max_len}")));
        }
        let mut words = split_words(text);
        if words.is_empty() {
            return Err(CorpusError::EmptyText);
        }
        words.truncate(max_len - 1);
        let mut ids: Vec<TokenId> = words.iter().map(|w| self.id(w).unwrap_or(UNK)).collect();
        ids.push(EOS);
        Ok(TokenSequence { ids, surface: words.join(" ") })
    }

    /// Joins tokens up to the first EOS, skipping PAD and BOS.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| id != PAD && id != BOS)
            .map(|&id| self.token(id).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Wraps already-decoded ids, appending EOS if it is missing.
    pub fn sequence_from_ids(&self, ids: &[TokenId]) -> TokenSequence {
        let mut ids: Vec<TokenId> = ids.iter().copied().take_while(|&id| id != EOS).collect();
        let surface = self.decode(&ids);
        ids.push(EOS);
        TokenSequence { ids, surface }
    }

    /// File form: a tab-separated header row naming the reserved tokens,
    /// then one token per line; the n-th token line (from 0) has id n + 4.
    pub fn to_file_string(&self) -> String {
        let mut out = RESERVED.join("\t");
        out.push('\n');
        for t in self.corpus_tokens() {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn from_file_string(text: &str) -> Result<Self, CorpusError> {
        let mut lines = text.lines();
        let header = lines.next().unwrap_or_default();
        if header.split('\t').collect::<Vec<_>>() != RESERVED {
            return Err(CorpusError::Parse { line: 1, msg: format!("expected reserved header {:?}", RESERVED.join("\t")) });
        }
        let tokens: Vec<&str> = lines.collect();
        Self::from_tokens(tokens.iter().copied()).map_err(|e| CorpusError::Parse { line: 0, msg: e.to_string() })
    }

    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        fs::write(path, self.to_file_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        Self::from_file_string(&fs::read_to_string(path)?)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = CorpusError;

    fn try_from(tokens: Vec<String>) -> Result<Self, Self::Error> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(CorpusError::InvalidArgument("vocabulary must start with the reserved tokens".into()));
        }
        Self::from_tokens(tokens.into_iter().skip(RESERVED.len()))
    }
}

/// Counts words on both sides of every pair, drops those seen fewer than
/// `min_count` times, and orders the rest by descending count then token.
pub fn build_vocab<'a, I>(pairs: I, min_count: usize) -> Result<Vocabulary, CorpusError>
where
    I: IntoIterator<Item = &'a PairExample>,
{
    if min_count < 1 {
        return Err(CorpusError::InvalidArgument("min_count must be at least 1".into()));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut seen_any = false;
    for p in pairs {
        seen_any = true;
        for w in split_words(&p.request).into_iter().chain(split_words(&p.rewrite)) {
            if !RESERVED.contains(&w.as_str()) {
                *counts.entry(w).or_default() += 1;
            }
        }
    }
    if !seen_any {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut kept: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Vocabulary::from_tokens(kept.into_iter().map(|(t, _)| t))
}

/// Convenience: [`Vocabulary::encode`].
pub fn tokenize(text: &str, vocab: &Vocabulary, max_len: usize) -> Result<TokenSequence, CorpusError> {
    vocab.encode(text, max_len)
}
