use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{bucket_batches, Batch, Seq2SeqError, Seq2SeqModel, TrainConfig};
use crate::autodiff::{Adam, Gradients, Optimizer, Scalar, Tape};
use crate::corpus::{PairExample, TokenSequence, Vocabulary};

/// A (source, target) example in model-facing form.
pub type EncodedPair = (TokenSequence, TokenSequence);

/// Encodes pairs in the augmentation direction: rewrite in, request out.
pub fn encode_inverse_pairs(pairs: &[PairExample], vocab: &Vocabulary, max_len: usize) -> Result<Vec<EncodedPair>, Seq2SeqError> {
    pairs.iter().map(|p| Ok((vocab.encode(&p.rewrite, max_len)?, vocab.encode(&p.request, max_len)?))).collect()
}

/// Endless sequence of length-bucketed batches, reshuffled every epoch.
pub struct BatchStream {
    lengths: Vec<usize>,
    token_budget: usize,
    rng: ChaCha8Rng,
    pending: Vec<Vec<usize>>,
}

impl BatchStream {
    pub fn new(data: &[EncodedPair], token_budget: usize, seed: u64) -> Self {
        let lengths = data.iter().map(|(s, t)| s.len().max(t.len())).collect();
        Self { lengths, token_budget, rng: ChaCha8Rng::seed_from_u64(seed), pending: Vec::new() }
    }

    pub fn next_indices(&mut self) -> Vec<usize> {
        if self.pending.is_empty() {
            self.pending = bucket_batches(&self.lengths, self.token_budget, &mut self.rng);
            self.pending.reverse();
        }
        self.pending.pop().unwrap_or_default()
    }
}

pub fn make_batch(data: &[EncodedPair], indices: &[usize], max_len: usize) -> Result<Batch, Seq2SeqError> {
    let pairs: Vec<(&TokenSequence, &TokenSequence)> = indices.iter().map(|&i| (&data[i].0, &data[i].1)).collect();
    Batch::from_pairs(&pairs, max_len)
}

/// Loss and gradients of one teacher-forced batch.
pub fn mle_gradients<T: Scalar>(model: &Seq2SeqModel<T>, batch: &Batch) -> Result<(f64, Gradients<T>), Seq2SeqError> {
    let mut tape = Tape::new(model.params());
    let loss = model.batch_loss(&mut tape, batch)?;
    let value = tape.item(loss).as_f64();
    Ok((value, tape.backward(loss)?))
}

/// Token-weighted mean cross-entropy over `data`.
pub fn evaluate_loss<T: Scalar>(model: &Seq2SeqModel<T>, data: &[EncodedPair], token_budget: usize) -> Result<f64, Seq2SeqError> {
    if data.is_empty() {
        return Err(Seq2SeqError::InvalidConfig("cannot evaluate on an empty set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let lengths: Vec<usize> = data.iter().map(|(s, t)| s.len().max(t.len())).collect();
    let (mut total, mut tokens) = (0.0, 0usize);
    for idx in bucket_batches(&lengths, token_budget, &mut rng) {
        let batch = make_batch(data, &idx, model.config().max_len)?;
        let mut tape = Tape::inference(model.params());
        let loss = model.batch_loss(&mut tape, &batch)?;
        let n = batch.target_tokens();
        total += tape.item(loss).as_f64() * n as f64;
        tokens += n;
    }
    Ok(total / tokens as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    /// Mean training loss since the previous record.
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dev_loss: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: f64,
    pub records: Vec<TrainRecord>,
}

/// Teacher-forced MLE training with Adam. `on_record` receives every
/// metrics record as it is produced; wall time is included only when
/// `log_wall_time` is set, which keeps the log reproducible by default.
pub fn train_mle<T: Scalar>(
    model: &mut Seq2SeqModel<T>,
    data: &[EncodedPair],
    dev: Option<&[EncodedPair]>,
    config: &TrainConfig,
    log_wall_time: bool,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<TrainSummary, Seq2SeqError> {
    config.validate()?;
    if data.is_empty() {
        return Err(Seq2SeqError::InvalidConfig("no training pairs".into()));
    }
    let start = Instant::now();
    let mut opt = Adam::new(config.adam.clone(), model.params());
    let mut stream = BatchStream::new(data, config.token_budget, config.seed);
    let max_len = model.config().max_len;
    let mut records = Vec::new();
    let (mut acc, mut count) = (0.0, 0usize);
    let mut final_loss = f64::NAN;
    for step in 1..=config.steps {
        let batch = make_batch(data, &stream.next_indices(), max_len)?;
        let lr = opt.current_lr();
        let (loss, grads) = mle_gradients(model, &batch)?;
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Seq2SeqError::NonFinite { step });
        }
        opt.step(model.params_mut(), &grads);
        acc += loss;
        count += 1;
        if step % config.log_every == 0 || step == config.steps {
            let dev_loss = match dev {
                Some(d) if config.eval_every > 0 && step % config.eval_every == 0 => Some(evaluate_loss(model, d, config.token_budget)?),
                _ => None,
            };
            final_loss = acc / count as f64;
            let rec = TrainRecord {
                step,
                loss: final_loss,
                lr,
                dev_loss,
                wall_time: log_wall_time.then(|| start.elapsed().as_secs_f64()),
            };
            log::info!("mle step {step}: loss {:.4}", rec.loss);
            on_record(&rec);
            records.push(rec);
            (acc, count) = (0.0, 0);
        }
    }
    Ok(TrainSummary { steps: config.steps, final_loss, records })
}
