//! Greedy, sampling and beam-search decoding.
//!
//! Each step re-runs the decoder over the whole prefix (no key/value cache)
//! against encoder memory computed once per call. Step distributions are
//! the full softmax over the vocabulary, reserved ids included, so reported
//! log-probabilities are exactly the model's.

use std::cmp::Ordering;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Seq2SeqError, Seq2SeqModel};
use crate::autodiff::{Scalar, Tape};
use crate::corpus::{TokenId, TokenSequence, Vocabulary, BOS, EOS};

/// Temperatures at or below this decode greedily.
pub const GREEDY_TEMPERATURE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DecodeResult {
    /// Emitted tokens, ending in EOS unless the length cap was hit.
    pub tokens: Vec<TokenId>,
    pub token_logprobs: Vec<f64>,
    pub logprob: f64,
}

impl DecodeResult {
    fn new(tokens: Vec<TokenId>, token_logprobs: Vec<f64>) -> Self {
        let logprob = token_logprobs.iter().sum();
        Self { tokens, token_logprobs, logprob }
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }

    pub fn content(&self) -> &[TokenId] {
        match self.tokens.split_last() {
            Some((&EOS, rest)) => rest,
            _ => &self.tokens,
        }
    }

    pub fn to_sequence(&self, vocab: &Vocabulary) -> TokenSequence {
        vocab.sequence_from_ids(&self.tokens)
    }
}

/// Log-softmax in 64-bit of `logits / temperature`.
pub fn log_softmax<T: Scalar>(logits: &[T], temperature: f64) -> Vec<f64> {
    let x: Vec<f64> = logits.iter().map(|v| v.as_f64() / temperature).collect();
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = x.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    x.iter().map(|v| v - lse).collect()
}

/// First index of the maximum, so ties go to the lowest token id.
fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw from a log-probability vector.
fn sample_index<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    // Rounding left the total just under one; take the last token with mass.
    logp.iter().rposition(|lp| lp.is_finite()).unwrap_or(logp.len() - 1)
}

impl<T: Scalar> Seq2SeqModel<T> {
    /// Runs lockstep decoding for `rows.len()` hypotheses over `sources`;
    /// `choose(i, logp)` picks the next token for hypothesis `i`.
    fn lockstep<F>(&self, sources: &[&[TokenId]], rows: &[usize], temperature: f64, mut choose: F) -> Result<Vec<DecodeResult>, Seq2SeqError>
    where
        F: FnMut(usize, &[f64]) -> (TokenId, f64),
    {
        let mut tape = Tape::inference(self.params());
        let memory = self.encode(&mut tape, sources)?;
        let mark = tape.len();
        let n = rows.len();
        let mut prefixes: Vec<Vec<TokenId>> = vec![vec![BOS]; n];
        let mut logps: Vec<Vec<f64>> = vec![Vec::new(); n];
        let mut active: Vec<usize> = (0..n).collect();
        let max_len = self.config().max_len;
        while !active.is_empty() {
            let step_rows: Vec<usize> = active.iter().map(|&i| rows[i]).collect();
            let step_prefixes: Vec<&[TokenId]> = active.iter().map(|&i| prefixes[i].as_slice()).collect();
            let len = prefixes[active[0]].len();
            let states = self.decode_states(&mut tape, &memory, &step_rows, &step_prefixes)?;
            let last: Vec<usize> = (0..active.len()).map(|a| a * len + len - 1).collect();
            let states = tape.gather_rows(states, &last)?;
            let logits = self.project(&mut tape, states)?;
            let v = self.vocab_size();
            let values = tape.value(logits).to_vec();
            tape.truncate(mark);
            let mut still = Vec::with_capacity(active.len());
            for (a, &i) in active.iter().enumerate() {
                let lp = log_softmax(&values[a * v..(a + 1) * v], temperature);
                let (tok, tok_lp) = choose(i, &lp);
                prefixes[i].push(tok);
                logps[i].push(tok_lp);
                if tok != EOS && prefixes[i].len() <= max_len {
                    still.push(i);
                }
            }
            active = still;
        }
        Ok(prefixes.into_iter().zip(logps).map(|(p, l)| DecodeResult::new(p[1..].to_vec(), l)).collect())
    }

    pub fn decode_greedy_batch(&self, sources: &[&[TokenId]]) -> Result<Vec<DecodeResult>, Seq2SeqError> {
        let rows: Vec<usize> = (0..sources.len()).collect();
        self.lockstep(sources, &rows, 1.0, |_, lp| {
            let t = argmax(lp);
            (t, lp[t])
        })
    }

    /// Argmax at every step, lowest id on ties; stops at EOS or `max_len` tokens.
    pub fn decode_greedy(&self, source: &TokenSequence) -> Result<DecodeResult, Seq2SeqError> {
        Ok(self.decode_greedy_batch(&[&source.ids])?.remove(0))
    }

    /// `k` samples per source, ordered by source then sample index. Recorded
    /// log-probabilities are those of the (tempered) distribution sampled from.
    pub fn decode_sample_batch<R: Rng + ?Sized>(
        &self,
        sources: &[&[TokenId]],
        k: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Vec<DecodeResult>, Seq2SeqError> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Seq2SeqError::InvalidConfig(format!("temperature must be positive, got {temperature}")));
        }
        if temperature <= GREEDY_TEMPERATURE {
            let greedy = self.decode_greedy_batch(sources)?;
            return Ok(greedy.into_iter().flat_map(|r| std::iter::repeat_n(r, k)).collect());
        }
        let rows: Vec<usize> = (0..sources.len()).flat_map(|s| std::iter::repeat_n(s, k)).collect();
        self.lockstep(sources, &rows, temperature, |_, lp| {
            let t = sample_index(lp, rng);
            (t, lp[t])
        })
    }

    pub fn decode_sample(&self, source: &TokenSequence, seed: u64, temperature: f64) -> Result<DecodeResult, Seq2SeqError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(self.decode_sample_batch(&[&source.ids], 1, temperature, &mut rng)?.remove(0))
    }

    /// Next-token probabilities after `prefix` (BOS excluded).
    pub fn next_token_distribution(&self, source: &TokenSequence, prefix: &[TokenId]) -> Result<Vec<f64>, Seq2SeqError> {
        let mut tape = Tape::inference(self.params());
        let memory = self.encode(&mut tape, &[&source.ids])?;
        let mut input = vec![BOS];
        input.extend_from_slice(prefix);
        let states = self.decode_states(&mut tape, &memory, &[0], &[&input])?;
        let states = tape.gather_rows(states, &[input.len() - 1])?;
        let logits = self.project(&mut tape, states)?;
        Ok(log_softmax(tape.value(logits), 1.0).into_iter().map(f64::exp).collect())
    }

    /// Beam search with this model as the step scorer; see [`beam_search`].
    pub fn decode_beam(&self, source: &TokenSequence, beam_width: usize, length_penalty: f64) -> Result<DecodeResult, Seq2SeqError> {
        let mut scorer = ModelScorer::new(self, source)?;
        beam_search(&mut scorer, beam_width, length_penalty)
    }
}

/// Next-token log-probabilities for a set of equal-length prefixes, which
/// exclude BOS. Lets the search algorithms run on any distribution.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// Longest output, EOS included.
    fn max_len(&self) -> usize;

    fn next_logprobs(&mut self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>, Seq2SeqError>;
}

/// A model bound to one source, with encoder memory computed once.
pub struct ModelScorer<'m, T: Scalar> {
    model: &'m Seq2SeqModel<T>,
    tape: Tape<'m, T>,
    memory: super::Memory,
    mark: usize,
}

impl<'m, T: Scalar> ModelScorer<'m, T> {
    pub fn new(model: &'m Seq2SeqModel<T>, source: &TokenSequence) -> Result<Self, Seq2SeqError> {
        let mut tape = Tape::inference(model.params());
        let memory = model.encode(&mut tape, &[&source.ids])?;
        let mark = tape.len();
        Ok(Self { model, tape, memory, mark })
    }
}

impl<T: Scalar> StepScorer for ModelScorer<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size()
    }

    fn max_len(&self) -> usize {
        self.model.config().max_len
    }

    fn next_logprobs(&mut self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>, Seq2SeqError> {
        let inputs: Vec<Vec<TokenId>> = prefixes.iter().map(|p| std::iter::once(BOS).chain(p.iter().copied()).collect()).collect();
        let refs: Vec<&[TokenId]> = inputs.iter().map(Vec::as_slice).collect();
        let len = inputs[0].len();
        let tape = &mut self.tape;
        let states = self.model.decode_states(tape, &self.memory, &vec![0; refs.len()], &refs)?;
        let last: Vec<usize> = (0..refs.len()).map(|a| a * len + len - 1).collect();
        let states = tape.gather_rows(states, &last)?;
        let logits = self.model.project(tape, states)?;
        let v = self.model.vocab_size();
        let out = tape.value(logits).chunks(v).map(|row| log_softmax(row, 1.0)).collect();
        tape.truncate(self.mark);
        Ok(out)
    }
}

/// Argmax decoding (lowest id on ties) against any scorer.
pub fn greedy_search<S: StepScorer>(scorer: &mut S) -> Result<DecodeResult, Seq2SeqError> {
    let (mut tokens, mut logps) = (Vec::new(), Vec::new());
    while tokens.last() != Some(&EOS) && tokens.len() < scorer.max_len() {
        let lp = scorer.next_logprobs(&[&tokens])?.remove(0);
        let t = argmax(&lp);
        tokens.push(t);
        logps.push(lp[t]);
    }
    Ok(DecodeResult::new(tokens, logps))
}

/// Beam search over summed log-probabilities.
///
/// Each step expands every live hypothesis by every token and keeps the
/// `beam_width` best candidates, ordered by score then token ids
/// lexicographically. Candidates ending in EOS retire as finished and are
/// ranked by `logP / len^length_penalty`; live hypotheses that reach the
/// length cap retire the same way. With `length_penalty == 0` the search
/// stops once no live hypothesis can beat the best finished one.
pub fn beam_search<S: StepScorer>(scorer: &mut S, beam_width: usize, length_penalty: f64) -> Result<DecodeResult, Seq2SeqError> {
    if beam_width == 0 {
        return Err(Seq2SeqError::InvalidConfig("beam_width must be at least 1".into()));
    }
    let max_len = scorer.max_len();
    let norm = |h: &Hyp| if length_penalty == 0.0 { h.logprob } else { h.logprob / (h.tokens.len() as f64).powf(length_penalty) };
    let mut alive = vec![Hyp { tokens: Vec::new(), logps: Vec::new(), logprob: 0.0 }];
    let mut finished: Vec<(f64, Hyp)> = Vec::new();
    while !alive.is_empty() {
        let prefixes: Vec<&[TokenId]> = alive.iter().map(|h| h.tokens.as_slice()).collect();
        let step = scorer.next_logprobs(&prefixes)?;
        let mut cands: Vec<(f64, usize, TokenId, f64)> = Vec::with_capacity(alive.len() * scorer.vocab_size());
        for (a, (h, lp)) in alive.iter().zip(&step).enumerate() {
            cands.extend(lp.iter().enumerate().map(|(t, &l)| (h.logprob + l, a, t, l)));
        }
        // Hypotheses share a length, so comparing (parent tokens, token) is lexicographic.
        cands.sort_by(|x, y| {
            y.0.partial_cmp(&x.0)
                .unwrap_or(Ordering::Equal)
                .then_with(|| alive[x.1].tokens.cmp(&alive[y.1].tokens))
                .then(x.2.cmp(&y.2))
        });
        let mut next = Vec::with_capacity(beam_width);
        for &(score, a, t, l) in cands.iter().take(beam_width) {
            let mut h = alive[a].clone();
            h.tokens.push(t);
            h.logps.push(l);
            h.logprob = score;
            if t == EOS || h.tokens.len() >= max_len {
                finished.push((norm(&h), h));
            } else {
                next.push(h);
            }
        }
        alive = next;
        if length_penalty == 0.0 {
            let best_done = finished.iter().map(|f| f.0).fold(f64::NEG_INFINITY, f64::max);
            if alive.first().is_some_and(|h| h.logprob <= best_done) {
                break;
            }
        }
    }
    let (_, best) = finished
        .into_iter()
        .min_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(Ordering::Equal).then_with(|| x.1.tokens.cmp(&y.1.tokens)))
        .expect("beam search always finishes a hypothesis");
    Ok(DecodeResult::new(best.tokens, best.logps))
}

#[derive(Debug, Clone)]
struct Hyp {
    tokens: Vec<TokenId>,
    logps: Vec<f64>,
    logprob: f64,
}
