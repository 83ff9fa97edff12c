use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{normalize_text, CorpusError};

/// One (request, rewrite) record. Text is stored normalized (lowercase,
/// single spaces); `mode`, `r_p` and `r_d` are set only on generated pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairExample {
    pub request: String,
    pub rewrite: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r_d: Option<f64>,
}

impl PairExample {
    pub fn new(request: &str, rewrite: &str, tag: Option<&str>) -> Result<Self, CorpusError> {
        let p = Self {
            request: normalize_text(request),
            rewrite: normalize_text(rewrite),
            tag: tag.map(str::to_string),
            mode: None,
            r_p: None,
            r_d: None,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        for (field, text) in [("request", &self.request), ("rewrite", &self.rewrite)] {
            if text.split_whitespace().next().is_none() {
                return Err(CorpusError::Field { line: 0, field, msg: "empty after tokenization".into() });
            }
        }
        Ok(())
    }

    /// Identity used for deduplication: the normalized text of both sides.
    pub fn key(&self) -> (&str, &str) {
        (&self.request, &self.rewrite)
    }
}

/// Reads JSON-lines pairs; blank lines are skipped, text is normalized.
pub fn read_pairs(path: &Path) -> Result<Vec<PairExample>, CorpusError> {
    let file = File::open(path).map_err(|e| CorpusError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))?;
    parse_pairs(BufReader::new(file))
}

pub fn parse_pairs<R: BufRead>(reader: R) -> Result<Vec<PairExample>, CorpusError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut p: PairExample =
            serde_json::from_str(&line).map_err(|e| CorpusError::Parse { line: i + 1, msg: e.to_string() })?;
        p.request = normalize_text(&p.request);
        p.rewrite = normalize_text(&p.rewrite);
        p.validate().map_err(|e| match e {
            CorpusError::Field { field, msg, .. } => CorpusError::Field { line: i + 1, field, msg },
            other => other,
        })?;
        out.push(p);
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[PairExample]) -> Result<(), CorpusError> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in pairs {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}
