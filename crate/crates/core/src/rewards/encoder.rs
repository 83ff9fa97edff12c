use std::collections::{HashSet, VecDeque};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::RewardError;
use crate::autodiff::{Adam, AdamConfig, Checkpoint, Gradients, Optimizer, ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::corpus::{PairExample, TokenId, TokenSequence, Vocabulary, DEFAULT_MAX_LEN};

const CHECKPOINT_KIND: &str = "mean-pool-encoder";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_emb: usize,
    pub d_out: usize,
    pub max_len: usize,
    /// Hashed character-trigram rows added to the word table; 0 keeps
    /// the encoder a pure bag of words.
    pub subword_buckets: usize,
    /// Pairs per contrastive batch; every other pair is a negative.
    pub batch_size: usize,
    pub steps: usize,
    /// Multiplier applied to cosine similarities before the softmax.
    pub scale: f64,
    pub seed: u64,
    pub log_every: usize,
    pub adam: AdamConfig,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_emb: 64,
            d_out: 64,
            max_len: DEFAULT_MAX_LEN,
            subword_buckets: 0,
            batch_size: 32,
            steps: 1500,
            scale: 10.0,
            seed: 0,
            log_every: 100,
            adam: AdamConfig { lr: 2e-3, warmup_steps: 0, ..AdamConfig::default() },
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let bad = |msg: String| Err(RewardError::InvalidConfig(msg));
        if self.d_emb == 0 || self.d_out == 0 {
            return bad("encoder dimensions must be positive".into());
        }
        if self.max_len < 2 {
            return bad(format!("max_len must be at least 2, got {}", self.max_len));
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size {} leaves no in-batch negatives; use at least 2", self.batch_size));
        }
        if !(self.scale.is_finite() && self.scale > 0.0) {
            return bad(format!("scale must be positive, got {}", self.scale));
        }
        if self.steps == 0 || self.log_every == 0 {
            return bad("steps and log_every must be positive".into());
        }
        if !(self.adam.lr.is_finite() && self.adam.lr > 0.0) {
            return bad(format!("adam.lr must be positive, got {}", self.adam.lr));
        }
        Ok(())
    }
}

/// Bag-of-words sentence encoder: token embeddings, mean pooling, one
/// affine projection. Used both for the dissimilarity reward and as the
/// retrieval dual encoder.
#[derive(Debug, Clone)]
pub struct SemanticEncoder<T: Scalar = f32> {
    config: EncoderConfig,
    vocab: Vocabulary,
    params: ParamStore<T>,
    embedding: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
}

impl<T: Scalar> SemanticEncoder<T> {
    /// Randomly initialised (untrained) encoder.
    pub fn new(config: EncoderConfig, vocab: Vocabulary, seed: u64) -> Result<Self, RewardError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (de, dout) = (config.d_emb, config.d_out);
        let embedding = params.insert("embedding", Tensor::randn(vec![vocab.len() + config.subword_buckets, de], 1.0, &mut rng)?.tracked())?;
        let proj_w = params.insert("proj.w", Tensor::randn(vec![de, dout], (de as f64).powf(-0.5), &mut rng)?.tracked())?;
        let proj_b = params.insert("proj.b", Tensor::zeros(vec![dout])?.tracked())?;
        Ok(Self { config, vocab, params, embedding, proj_w, proj_b })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.config.d_out
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// Feature ids of `text`: one per word, then one per character
    /// trigram of each `<word>` when subword buckets are enabled.
    pub fn tokenize(&self, text: &str) -> Result<TokenSequence, RewardError> {
        let mut seq = self.vocab.encode(text, self.config.max_len).map_err(|_| RewardError::EmptyUtterance)?;
        let buckets = self.config.subword_buckets;
        if buckets > 0 {
            let eos = seq.ids.pop().expect("encoded sequences end in EOS");
            for word in seq.surface.split(' ') {
                seq.ids.extend(char_trigrams(word).map(|h| self.vocab.len() + (h % buckets as u64) as usize));
            }
            seq.ids.push(eos);
        }
        Ok(seq)
    }

    /// Embeddings `[n, d_out]` of `n` non-empty id sequences.
    pub fn forward(&self, tape: &mut Tape<'_, T>, seqs: &[&[TokenId]]) -> Result<Var, RewardError> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(RewardError::EmptyUtterance);
        }
        let flat: Vec<TokenId> = seqs.concat();
        let n = flat.len();
        let mut pool = vec![T::zero(); seqs.len() * n];
        let mut offset = 0;
        for (i, s) in seqs.iter().enumerate() {
            let w = T::one() / T::from_usize(s.len()).unwrap();
            pool[i * n + offset..i * n + offset + s.len()].iter_mut().for_each(|p| *p = w);
            offset += s.len();
        }
        let table = tape.param(self.embedding);
        let e = tape.embedding(table, &flat)?;
        let p = tape.constant(Tensor::new(vec![seqs.len(), n], pool)?);
        let pooled = tape.matmul(p, e)?;
        let (w, b) = (tape.param(self.proj_w), tape.param(self.proj_b));
        Ok(tape.linear(pooled, w, b)?)
    }

    /// In-batch-negative softmax loss: row i of the cosine matrix between
    /// queries and keys should pick column i.
    pub fn contrastive_loss(&self, tape: &mut Tape<'_, T>, queries: &[&[TokenId]], keys: &[&[TokenId]]) -> Result<Var, RewardError> {
        let b = queries.len();
        if b < 2 || keys.len() != b {
            return Err(RewardError::InvalidConfig(format!(
                "contrastive batch needs at least 2 aligned pairs, got {b} queries and {} keys",
                keys.len()
            )));
        }
        let d = self.config.d_out;
        let q = self.forward(tape, queries)?;
        let q = tape.l2_normalize_rows(q)?;
        let k = self.forward(tape, keys)?;
        let k = tape.l2_normalize_rows(k)?;
        let q = tape.reshape(q, vec![1, b, d])?;
        let k = tape.reshape(k, vec![1, b, d])?;
        let sim = tape.batch_matmul(q, k, true)?;
        let sim = tape.reshape(sim, vec![b, b])?;
        let logits = tape.scale(sim, T::from_f64_lossy(self.config.scale));
        let targets: Vec<usize> = (0..b).collect();
        Ok(tape.softmax_cross_entropy(logits, &targets, None)?)
    }

    /// Unnormalised embeddings of id sequences, computed per sequence in
    /// f64 so a text's embedding does not depend on its batch neighbours.
    pub fn embed_ids(&self, seqs: &[&[TokenId]]) -> Result<Vec<Vec<f64>>, RewardError> {
        if seqs.iter().any(|s| s.is_empty()) {
            return Err(RewardError::EmptyUtterance);
        }
        let (de, dout) = (self.config.d_emb, self.config.d_out);
        let table = self.params.get(self.embedding).data();
        let w = self.params.get(self.proj_w).data();
        let b = self.params.get(self.proj_b).data();
        let mut out = Vec::with_capacity(seqs.len());
        for s in seqs {
            let mut pooled = vec![0.0f64; de];
            for &id in *s {
                pooled.iter_mut().zip(&table[id * de..(id + 1) * de]).for_each(|(p, x)| *p += x.as_f64());
            }
            let n = s.len() as f64;
            let mut e: Vec<f64> = b.iter().map(|x| x.as_f64()).collect();
            for (i, p) in pooled.iter().enumerate() {
                let p = p / n;
                e.iter_mut().zip(&w[i * dout..(i + 1) * dout]).for_each(|(o, x)| *o += p * x.as_f64());
            }
            out.push(e);
        }
        Ok(out)
    }

    pub fn embed_texts(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RewardError> {
        let seqs = texts.iter().map(|t| self.tokenize(t)).collect::<Result<Vec<_>, _>>()?;
        let ids: Vec<&[TokenId]> = seqs.iter().map(TokenSequence::content).collect();
        self.embed_ids(&ids)
    }

    pub fn embed(&self, text: &str) -> Result<Vec<f64>, RewardError> {
        Ok(self.embed_texts(&[text])?.remove(0))
    }

    pub fn checkpoint(&self) -> Checkpoint<T> {
        Checkpoint::from_store(&self.params, json!({ "kind": CHECKPOINT_KIND, "encoder": self.config, "vocab": self.vocab }))
    }

    pub fn save(&self, path: &Path) -> Result<(), RewardError> {
        Ok(self.checkpoint().save(path)?)
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self, RewardError> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(RewardError::Checkpoint("not an encoder checkpoint".into()));
        }
        let config: EncoderConfig = serde_json::from_value(ck.meta["encoder"].clone())
            .map_err(|e| RewardError::Checkpoint(format!("encoder config: {e}")))?;
        let vocab: Vocabulary =
            serde_json::from_value(ck.meta["vocab"].clone()).map_err(|e| RewardError::Checkpoint(format!("vocab: {e}")))?;
        let mut enc = Self::new(config, vocab, 0)?;
        ck.load_into(&mut enc.params)?;
        Ok(enc)
    }

    pub fn load(path: &Path) -> Result<Self, RewardError> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// FNV-1a hashes of the character trigrams of `<word>`.
fn char_trigrams(word: &str) -> impl Iterator<Item = u64> {
    let chars: Vec<char> = std::iter::once('<').chain(word.chars()).chain(std::iter::once('>')).collect();
    (0..chars.len().saturating_sub(2)).map(move |i| {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for c in &chars[i..i + 3] {
            for b in c.to_string().bytes() {
                h = (h ^ b as u64).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    })
}

/// Cosine similarity in f64; zero vectors have similarity 0.
///
/// `dot / sqrt(|a|² |b|²)` returns exactly 1 for identical inputs, because
/// a correctly rounded square root of a rounded square recovers the value.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let aa: f64 = a.iter().map(|x| x * x).sum();
    let bb: f64 = b.iter().map(|x| x * x).sum();
    let denom = (aa * bb).sqrt();
    if denom == 0.0 {
        0.0
    } else {
        (dot / denom).clamp(-1.0, 1.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EncoderRecord {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Packs shuffled pair indices into batches in which no request and no
/// rewrite repeats, so in-batch negatives are never copies of the positive.
/// Items that collide are deferred to a later batch; a final batch smaller
/// than 2 is dropped.
pub fn contrastive_batches<R: rand::Rng + ?Sized>(keys: &[(&[TokenId], &[TokenId])], batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.shuffle(rng);
    let mut pending: VecDeque<usize> = order.into();
    let mut batches = Vec::new();
    while pending.len() >= 2 {
        let mut batch = Vec::with_capacity(batch_size);
        let (mut queries, mut docs) = (HashSet::new(), HashSet::new());
        let mut deferred = Vec::new();
        while batch.len() < batch_size {
            let Some(i) = pending.pop_front() else { break };
            let (q, d) = keys[i];
            if queries.contains(q) || docs.contains(d) {
                deferred.push(i);
            } else {
                queries.insert(q);
                docs.insert(d);
                batch.push(i);
            }
        }
        for i in deferred.into_iter().rev() {
            pending.push_front(i);
        }
        if batch.len() < 2 {
            break;
        }
        batches.push(batch);
    }
    batches
}

/// Trains an encoder on (request, rewrite) pairs with in-batch negatives.
pub fn train_semantic_encoder<T: Scalar>(
    pairs: &[PairExample],
    vocab: Vocabulary,
    config: &EncoderConfig,
    mut on_record: impl FnMut(&EncoderRecord),
) -> Result<(SemanticEncoder<T>, Vec<EncoderRecord>), RewardError> {
    config.validate()?;
    if pairs.len() < 2 {
        return Err(RewardError::InvalidConfig(format!("need at least 2 pairs, got {}", pairs.len())));
    }
    let mut encoder = SemanticEncoder::<T>::new(config.clone(), vocab, config.seed)?;
    let encoded: Vec<(TokenSequence, TokenSequence)> =
        pairs.iter().map(|p| Ok((encoder.tokenize(&p.request)?, encoder.tokenize(&p.rewrite)?))).collect::<Result<_, RewardError>>()?;
    let keys: Vec<(&[TokenId], &[TokenId])> = encoded.iter().map(|(q, d)| (q.content(), d.content())).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut opt = Adam::new(config.adam.clone(), encoder.params());
    let mut pending: Vec<Vec<usize>> = Vec::new();
    let mut records = Vec::new();
    let (mut acc, mut count) = (0.0, 0usize);
    for step in 1..=config.steps {
        if pending.is_empty() {
            pending = contrastive_batches(&keys, config.batch_size, &mut rng);
            if pending.is_empty() {
                return Err(RewardError::InvalidConfig("pairs do not contain two distinct requests and rewrites".into()));
            }
            pending.reverse();
        }
        let batch = pending.pop().unwrap();
        let queries: Vec<&[TokenId]> = batch.iter().map(|&i| keys[i].0).collect();
        let docs: Vec<&[TokenId]> = batch.iter().map(|&i| keys[i].1).collect();
        let lr = opt.current_lr();
        let (loss, grads) = {
            let mut tape = Tape::new(encoder.params());
            let loss = encoder.contrastive_loss(&mut tape, &queries, &docs)?;
            let value = tape.item(loss).as_f64();
            let grads: Gradients<T> = tape.backward(loss)?;
            (value, grads)
        };
        if !loss.is_finite() || !grads.all_finite() {
            return Err(RewardError::NonFinite { step });
        }
        opt.step(encoder.params_mut(), &grads);
        acc += loss;
        count += 1;
        if step % config.log_every == 0 || step == config.steps {
            let rec = EncoderRecord { step, loss: acc / count as f64, lr };
            log::info!("encoder step {step}: loss {:.4}", rec.loss);
            on_record(&rec);
            records.push(rec);
            (acc, count) = (0.0, 0);
        }
    }
    Ok((encoder, records))
}
