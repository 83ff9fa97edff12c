//! Dense dual-encoder retrieval: a contrastively trained mean-pool encoder,
//! an exact cosine index over rewrite embeddings, and P@K evaluation.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Scalar;
use crate::corpus::{normalize_text, PairExample, Vocabulary};
use crate::rewards::{train_semantic_encoder, EncoderConfig, EncoderRecord, RewardError, SemanticEncoder};

pub const MATRIX_FILE: &str = "embeddings.json";
pub const STRINGS_FILE: &str = "rewrites.txt";
const NORM_TOLERANCE: f64 = 1e-6;
const UNTAGGED: &str = "untagged";

#[derive(Debug, Error)]
pub enum RetrievalError {
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Encoder(#[from] RewardError),
    #[error("index file {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("index file {path}: {message}")]
    Format { path: String, message: String },
}

/// The retriever shares the reward encoder's architecture but is always a
/// separately trained instance.
pub type Retriever<T = f32> = SemanticEncoder<T>;

/// Trains a shared-weight dual encoder on (request, rewrite) pairs with an
/// in-batch-negative softmax loss.
pub fn train_retriever<T: Scalar>(
    pairs: &[PairExample],
    vocab: Vocabulary,
    config: &EncoderConfig,
    on_record: impl FnMut(&EncoderRecord),
) -> Result<(Retriever<T>, Vec<EncoderRecord>), RetrievalError> {
    Ok(train_semantic_encoder(pairs, vocab, config, on_record)?)
}

#[derive(Serialize, Deserialize)]
struct MatrixFile {
    dim: usize,
    rows: Vec<Vec<f64>>,
}

/// Exact nearest-neighbour index of unit-norm rewrite embeddings. Rows keep
/// insertion order, which also breaks similarity ties.
#[derive(Clone)]
pub struct RetrievalIndex<'a, T: Scalar = f32> {
    encoder: &'a Retriever<T>,
    dim: usize,
    rows: Vec<f64>,
    strings: Vec<String>,
    positions: HashMap<String, usize>,
}

fn unit(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Embeds the distinct normalized rewrites in first-seen order.
pub fn build_index<'a, T: Scalar, S: AsRef<str>>(encoder: &'a Retriever<T>, rewrites: &[S]) -> Result<RetrievalIndex<'a, T>, RetrievalError> {
    if rewrites.is_empty() {
        return Err(RetrievalError::Invalid("cannot build an index from an empty rewrite list".into()));
    }
    let mut strings = Vec::new();
    let mut positions = HashMap::new();
    for r in rewrites {
        let text = normalize_text(r.as_ref());
        if text.is_empty() {
            return Err(RetrievalError::Invalid("empty rewrite in index data".into()));
        }
        if !positions.contains_key(&text) {
            positions.insert(text.clone(), strings.len());
            strings.push(text);
        }
    }
    let refs: Vec<&str> = strings.iter().map(String::as_str).collect();
    let embeddings = encoder.embed_texts(&refs)?;
    let dim = encoder.dim();
    let mut rows = Vec::with_capacity(dim * strings.len());
    for e in embeddings {
        let e = unit(e);
        if (dot(&e, &e).sqrt() - 1.0).abs() > NORM_TOLERANCE {
            return Err(RetrievalError::Invalid("encoder produced a zero embedding".into()));
        }
        rows.extend(e);
    }
    log::info!("index: {} rewrites, {} distinct", rewrites.len(), strings.len());
    Ok(RetrievalIndex { encoder, dim, rows, strings, positions })
}

impl<'a, T: Scalar> RetrievalIndex<'a, T> {
    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn encoder(&self) -> &'a Retriever<T> {
        self.encoder
    }

    pub fn strings(&self) -> &[String] {
        &self.strings
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Row of a rewrite after normalization, if indexed.
    pub fn position(&self, rewrite: &str) -> Option<usize> {
        self.positions.get(&normalize_text(rewrite)).copied()
    }

    /// Unit-norm query embeddings.
    pub fn embed_queries(&self, queries: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        Ok(self.encoder.embed_texts(queries)?.into_iter().map(unit).collect())
    }

    /// Cosine similarity of a unit query against every row.
    pub fn scores(&self, query: &[f64]) -> Vec<f64> {
        self.rows.chunks(self.dim).map(|r| dot(query, r)).collect()
    }

    /// Top `k` rows by similarity, ties to the earlier row.
    pub fn search_embedding(&self, query: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self.scores(query).into_iter().enumerate().collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(k);
        ranked
    }

    pub fn search(&self, query: &str, k: usize) -> Result<Vec<(usize, f64)>, RetrievalError> {
        Ok(self.search_embedding(&self.embed_queries(&[query])?[0], k))
    }

    /// Zero-based rank of row `target`: the number of rows ordered before it.
    pub fn rank_of(&self, query: &[f64], target: usize) -> usize {
        let s = self.scores(query);
        let t = s[target];
        s.iter().enumerate().filter(|&(i, &v)| v > t || (v == t && i < target)).count()
    }

    /// Writes the embedding matrix and the aligned strings into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), RetrievalError> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| RetrievalError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let matrix = MatrixFile { dim: self.dim, rows: self.rows.chunks(self.dim).map(<[f64]>::to_vec).collect() };
        let mpath = dir.join(MATRIX_FILE);
        fs::write(&mpath, serde_json::to_string(&matrix).expect("matrix serializes")).map_err(io(&mpath))?;
        let spath = dir.join(STRINGS_FILE);
        let mut text = self.strings.join("\n");
        text.push('\n');
        fs::write(&spath, text).map_err(io(&spath))
    }

    /// Reads an index written by `save`; the encoder must match its width.
    pub fn load(dir: &Path, encoder: &'a Retriever<T>) -> Result<Self, RetrievalError> {
        let mpath = dir.join(MATRIX_FILE);
        let spath = dir.join(STRINGS_FILE);
        let read = |p: &Path| fs::read_to_string(p).map_err(|source| RetrievalError::Io { path: p.display().to_string(), source });
        let format = |p: &Path, message: String| RetrievalError::Format { path: p.display().to_string(), message };
        let matrix: MatrixFile = serde_json::from_str(&read(&mpath)?).map_err(|e| format(&mpath, e.to_string()))?;
        let strings: Vec<String> = read(&spath)?.lines().map(str::to_string).collect();
        if matrix.dim != encoder.dim() {
            return Err(format(&mpath, format!("dim {} does not match encoder dim {}", matrix.dim, encoder.dim())));
        }
        if matrix.rows.len() != strings.len() || strings.is_empty() {
            return Err(format(&mpath, format!("{} rows for {} strings", matrix.rows.len(), strings.len())));
        }
        let mut rows = Vec::with_capacity(matrix.dim * strings.len());
        for (i, r) in matrix.rows.into_iter().enumerate() {
            if r.len() != matrix.dim || (dot(&r, &r).sqrt() - 1.0).abs() > NORM_TOLERANCE {
                return Err(format(&mpath, format!("row {i} is not a unit vector of width {}", matrix.dim)));
            }
            rows.extend(r);
        }
        let mut positions = HashMap::new();
        for (i, s) in strings.iter().enumerate() {
            if positions.insert(s.clone(), i).is_some() {
                return Err(format(&spath, format!("duplicate rewrite {s:?}")));
            }
        }
        Ok(Self { encoder, dim: matrix.dim, rows, strings, positions })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagReport {
    pub queries: usize,
    pub p_at_k: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub queries: usize,
    /// Queries whose gold rewrite is not indexed; each counts as a miss.
    pub gold_missing: usize,
    pub index_size: usize,
    pub p_at_k: BTreeMap<String, f64>,
    pub per_tag: BTreeMap<String, TagReport>,
}

pub fn p_at_k_key(k: usize) -> String {
    format!("p@{k}")
}

impl EvalReport {
    pub fn p(&self, k: usize) -> Option<f64> {
        self.p_at_k.get(&p_at_k_key(k)).copied()
    }
}

/// Parses a comma-separated list of cutoffs such as `1,5`.
pub fn parse_ks(text: &str) -> Result<Vec<usize>, RetrievalError> {
    let ks = text
        .split(',')
        .map(|s| s.trim().parse::<usize>().map_err(|_| RetrievalError::Invalid(format!("bad cutoff {s:?} in ks"))))
        .collect::<Result<Vec<_>, _>>()?;
    check_ks(&ks)
}

fn check_ks(ks: &[usize]) -> Result<Vec<usize>, RetrievalError> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(RetrievalError::Invalid("ks must be a non-empty list of positive cutoffs".into()));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    Ok(ks)
}

fn fractions(hits: &[usize], ks: &[usize], n: usize) -> BTreeMap<String, f64> {
    ks.iter().zip(hits).map(|(&k, &h)| (p_at_k_key(k), h as f64 / n as f64)).collect()
}

/// Fraction of test requests whose gold rewrite ranks within the top K.
pub fn evaluate_p_at_k<T: Scalar>(index: &RetrievalIndex<'_, T>, test: &[PairExample], ks: &[usize]) -> Result<EvalReport, RetrievalError> {
    if test.is_empty() {
        return Err(RetrievalError::Invalid("empty test set".into()));
    }
    let ks = check_ks(ks)?;
    let queries: Vec<&str> = test.iter().map(|p| p.request.as_str()).collect();
    let embedded = index.embed_queries(&queries)?;
    let mut hits = vec![0usize; ks.len()];
    let mut per_tag: BTreeMap<String, (usize, Vec<usize>)> = BTreeMap::new();
    let mut gold_missing = 0;
    for (pair, q) in test.iter().zip(&embedded) {
        let rank = match index.position(&pair.rewrite) {
            Some(gold) => Some(index.rank_of(q, gold)),
            None => {
                gold_missing += 1;
                None
            }
        };
        let tag = per_tag.entry(pair.tag.clone().unwrap_or_else(|| UNTAGGED.into())).or_insert_with(|| (0, vec![0; ks.len()]));
        tag.0 += 1;
        for (j, &k) in ks.iter().enumerate() {
            if rank.is_some_and(|r| r < k) {
                hits[j] += 1;
                tag.1[j] += 1;
            }
        }
    }
    if gold_missing > 0 {
        log::warn!("{gold_missing} of {} gold rewrites are not indexed and count as misses", test.len());
    }
    let report = EvalReport {
        queries: test.len(),
        gold_missing,
        index_size: index.len(),
        p_at_k: fractions(&hits, &ks, test.len()),
        per_tag: per_tag.into_iter().map(|(t, (n, h))| (t, TagReport { queries: n, p_at_k: fractions(&h, &ks, n) })).collect(),
    };
    Ok(report)
}
