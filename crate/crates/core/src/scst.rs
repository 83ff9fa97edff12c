//! Self-critical sequence training: REINFORCE against a sequence reward
//! with the model's own greedy decode as baseline, mixed with MLE.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AdamConfig, AutodiffError, Gradients, Optimizer, ParamStore, Scalar, Tape, Var};
use crate::corpus::{TokenId, Vocabulary};
use crate::rewards::{RewardError, RewardFn, RewardKind};
use crate::seq2seq::{
    evaluate_loss, make_batch, mle_gradients, Batch, BatchStream, DecodeResult, EncodedPair, Seq2SeqError, Seq2SeqModel,
};

const DEV_CHUNK: usize = 64;
const DEV_SEED_SALT: u64 = 0xde5e_ed00;
const SAMPLE_SEED_SALT: u64 = 0x5c57;

#[derive(Debug, Error)]
pub enum ScstError {
    #[error("{0}")]
    InvalidConfig(String),
    #[error("loss diverged at step {step} after {restorations} restorations")]
    Diverged { step: usize, restorations: usize },
    #[error(transparent)]
    Seq2Seq(#[from] Seq2SeqError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

/// Anything that scores a generated utterance against its source.
pub trait SequenceReward {
    fn reward(&self, candidate: &str, source: &str) -> Result<f64, RewardError>;
}

impl<T: Scalar> SequenceReward for RewardFn<'_, T> {
    fn reward(&self, candidate: &str, source: &str) -> Result<f64, RewardError> {
        self.score(candidate, source)
    }
}

impl<F: Fn(&str, &str) -> Result<f64, RewardError>> SequenceReward for F {
    fn reward(&self, candidate: &str, source: &str) -> Result<f64, RewardError> {
        self(candidate, source)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineMode {
    Greedy,
    Beam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScstConfig {
    pub reward: RewardKind,
    /// Phonetic share of the combined reward.
    pub alpha: f64,
    /// MLE share λ of the mixed loss; the policy gradient gets `1 - λ`.
    pub mle_weight: f64,
    pub samples_per_input: usize,
    pub temperature: f64,
    pub steps: usize,
    pub token_budget: usize,
    pub eval_every: usize,
    /// Evaluations without a dev-reward improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    pub baseline: BaselineMode,
    pub baseline_beam_width: usize,
    /// Steps whose failed-reward fraction exceeds this are skipped.
    pub max_failure_rate: f64,
    pub max_restorations: usize,
    pub adam: AdamConfig,
}

impl Default for ScstConfig {
    fn default() -> Self {
        Self {
            reward: RewardKind::Phonetic,
            alpha: 0.5,
            mle_weight: 0.5,
            samples_per_input: 1,
            temperature: 1.0,
            steps: 2000,
            token_budget: 256,
            eval_every: 250,
            patience: 4,
            seed: 0,
            baseline: BaselineMode::Greedy,
            baseline_beam_width: 4,
            max_failure_rate: 0.1,
            max_restorations: 3,
            adam: AdamConfig { lr: 1e-4, warmup_steps: 0, ..AdamConfig::default() },
        }
    }
}

impl ScstConfig {
    pub fn validate(&self) -> Result<(), ScstError> {
        let bad = |msg: String| Err(ScstError::InvalidConfig(msg));
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.alpha) {
            return bad(format!("alpha must lie in [0, 1], got {}", self.alpha));
        }
        if !unit(self.mle_weight) {
            return bad(format!("mle_weight must lie in [0, 1], got {}", self.mle_weight));
        }
        if !unit(self.max_failure_rate) {
            return bad(format!("max_failure_rate must lie in [0, 1], got {}", self.max_failure_rate));
        }
        if self.samples_per_input == 0 {
            return bad("samples_per_input must be at least 1".into());
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        if self.steps == 0 || self.eval_every == 0 || self.patience == 0 || self.token_budget == 0 {
            return bad("steps, eval_every, patience and token_budget must be positive".into());
        }
        if self.baseline == BaselineMode::Beam && self.baseline_beam_width == 0 {
            return bad("baseline_beam_width must be positive".into());
        }
        if !(self.adam.lr.is_finite() && self.adam.lr > 0.0) {
            return bad(format!("adam.lr must be positive, got {}", self.adam.lr));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScstBatchStats {
    pub sampled_reward: f64,
    pub baseline_reward: f64,
    pub advantage: f64,
    pub mle_loss: f64,
    pub pg_loss: f64,
    /// `λ · mle_loss + pg_weight · pg_loss`.
    pub loss: f64,
    pub samples: usize,
    pub failures: usize,
    /// Set when too many rewards failed; no update is made.
    pub aborted: bool,
}

/// `(1/N) Σ_n A_n · (−log p(U_n))` for `N` padded samples of width `width`
/// laid out row-major in `logits`. Only the first `lengths[n]` positions of
/// sample `n` count, so a sampled PAD id is scored like any other token.
pub fn policy_gradient_loss<T: Scalar>(
    tape: &mut Tape<'_, T>,
    logits: Var,
    targets: &[TokenId],
    lengths: &[usize],
    width: usize,
    advantages: &[f64],
) -> Result<Var, AutodiffError> {
    let n = advantages.len();
    let mut coef = vec![T::zero(); targets.len()];
    for (i, (&len, &a)) in lengths.iter().zip(advantages).enumerate() {
        let c = T::from_f64_lossy(a / n as f64);
        coef[i * width..i * width + len].iter_mut().for_each(|x| *x = c);
    }
    tape.weighted_cross_entropy(logits, targets, &coef)
}

fn baselines<T: Scalar>(
    model: &Seq2SeqModel<T>,
    pairs: &[&EncodedPair],
    sources: &[&[TokenId]],
    config: &ScstConfig,
) -> Result<Vec<DecodeResult>, Seq2SeqError> {
    match config.baseline {
        BaselineMode::Greedy => model.decode_greedy_batch(sources),
        BaselineMode::Beam => pairs.iter().map(|p| model.decode_beam(&p.0, config.baseline_beam_width, 1.0)).collect(),
    }
}

/// Mixed-loss gradients for the pairs at `indices`. Returns `None` for the
/// gradients when the step is aborted for reward failures.
#[allow(clippy::too_many_arguments)]
pub fn scst_gradients<T: Scalar, R: SequenceReward + ?Sized>(
    model: &Seq2SeqModel<T>,
    vocab: &Vocabulary,
    data: &[EncodedPair],
    indices: &[usize],
    reward: &R,
    config: &ScstConfig,
    pg_weight: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(ScstBatchStats, Option<Gradients<T>>), ScstError> {
    if indices.is_empty() {
        return Err(ScstError::InvalidConfig("empty SCST batch".into()));
    }
    let max_len = model.config().max_len;
    let k = config.samples_per_input;
    let pairs: Vec<&EncodedPair> = indices.iter().map(|&i| &data[i]).collect();
    let sources: Vec<&[TokenId]> = pairs.iter().map(|p| p.0.ids.as_slice()).collect();
    let source_text: Vec<String> = pairs.iter().map(|p| vocab.decode(&p.0.ids)).collect();

    let base = baselines(model, &pairs, &sources, config)?;
    let base_r: Vec<Option<f64>> =
        base.iter().zip(&source_text).map(|(b, s)| reward.reward(&vocab.decode(&b.tokens), s).ok()).collect();
    let samples = model.decode_sample_batch(&sources, k, config.temperature, rng)?;
    let n = samples.len();
    let mut advantages = vec![0.0; n];
    let (mut sum_r, mut sum_b, mut ok) = (0.0, 0.0, 0usize);
    let mut failures = 0;
    for (j, s) in samples.iter().enumerate() {
        let i = j / k;
        match (reward.reward(&vocab.decode(&s.tokens), &source_text[i]), base_r[i]) {
            (Ok(r), Some(b)) => {
                advantages[j] = r - b;
                sum_r += r;
                sum_b += b;
                ok += 1;
            }
            _ => failures += 1,
        }
    }
    if failures > 0 {
        log::warn!("{failures} of {n} rewards failed; their advantages are set to 0");
    }
    let mean = |x: f64| if ok > 0 { x / ok as f64 } else { 0.0 };
    let mut stats = ScstBatchStats {
        sampled_reward: mean(sum_r),
        baseline_reward: mean(sum_b),
        advantage: mean(sum_r - sum_b),
        mle_loss: 0.0,
        pg_loss: 0.0,
        loss: 0.0,
        samples: n,
        failures,
        aborted: failures as f64 > config.max_failure_rate * n as f64,
    };
    if stats.aborted {
        log::warn!("SCST step aborted: {failures} of {n} rewards failed");
        return Ok((stats, None));
    }

    let lambda = config.mle_weight;
    let (mle_loss, mut grads) = mle_gradients(model, &make_batch(data, indices, max_len)?)?;
    grads.scale(T::from_f64_lossy(lambda));
    stats.mle_loss = mle_loss;
    if pg_weight > 0.0 {
        let rows: Vec<Vec<TokenId>> = (0..n).map(|j| sources[j / k].to_vec()).collect();
        let targets: Vec<&[TokenId]> = samples.iter().map(|s| s.tokens.as_slice()).collect();
        let lengths: Vec<usize> = targets.iter().map(|t| t.len()).collect();
        let batch = Batch::from_ids(rows, &targets, max_len)?;
        let mut tape = Tape::new(model.params());
        let logits = model.batch_logits(&mut tape, &batch)?;
        let pg = policy_gradient_loss(&mut tape, logits, &batch.flat_targets(), &lengths, batch.target_len(), &advantages)?;
        stats.pg_loss = tape.item(pg).as_f64();
        let mut g = tape.backward(pg)?;
        g.scale(T::from_f64_lossy(pg_weight));
        grads.add(&g);
    }
    stats.loss = lambda * stats.mle_loss + pg_weight * stats.pg_loss;
    Ok((stats, Some(grads)))
}

/// One SCST update. `pg_weight` is normally `1 - λ`.
#[allow(clippy::too_many_arguments)]
pub fn scst_step<T: Scalar, O: Optimizer<T>, R: SequenceReward + ?Sized>(
    model: &mut Seq2SeqModel<T>,
    optimizer: &mut O,
    vocab: &Vocabulary,
    data: &[EncodedPair],
    indices: &[usize],
    reward: &R,
    config: &ScstConfig,
    pg_weight: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ScstBatchStats, ScstError> {
    let (stats, grads) = scst_gradients(model, vocab, data, indices, reward, config, pg_weight, rng)?;
    if let Some(g) = grads {
        if stats.loss.is_finite() && g.all_finite() {
            optimizer.step(model.params_mut(), &g);
        }
    }
    Ok(stats)
}

/// Dev-set quality of the current policy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct DevEvaluation {
    /// Mean reward of one sample per source, drawn with a fixed seed.
    pub sampled_reward: f64,
    pub mle_loss: f64,
    pub failures: usize,
}

pub fn evaluate_dev<T: Scalar, R: SequenceReward + ?Sized>(
    model: &Seq2SeqModel<T>,
    vocab: &Vocabulary,
    dev: &[EncodedPair],
    reward: &R,
    temperature: f64,
    token_budget: usize,
    seed: u64,
) -> Result<DevEvaluation, ScstError> {
    if dev.is_empty() {
        return Err(ScstError::InvalidConfig("empty dev set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DEV_SEED_SALT);
    let (mut total, mut ok, mut failures) = (0.0, 0usize, 0usize);
    for chunk in dev.chunks(DEV_CHUNK) {
        let sources: Vec<&[TokenId]> = chunk.iter().map(|p| p.0.ids.as_slice()).collect();
        let samples = model.decode_sample_batch(&sources, 1, temperature, &mut rng)?;
        for (s, p) in samples.iter().zip(chunk) {
            match reward.reward(&vocab.decode(&s.tokens), &vocab.decode(&p.0.ids)) {
                Ok(r) => {
                    total += r;
                    ok += 1;
                }
                Err(_) => failures += 1,
            }
        }
    }
    let sampled_reward = if ok > 0 { total / ok as f64 } else { 0.0 };
    Ok(DevEvaluation { sampled_reward, mle_loss: evaluate_loss(model, dev, token_budget)?, failures })
}

/// One metrics-log line: training means since the previous line plus the
/// dev evaluation at `step`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScstRecord {
    pub step: usize,
    pub mean_sampled_reward: f64,
    pub baseline_reward: f64,
    pub advantage: f64,
    pub mle_loss: f64,
    pub pg_loss: f64,
    pub dev_sampled_reward: f64,
    pub dev_mle_loss: f64,
    pub pg_weight: f64,
    pub failures: usize,
    pub aborted_steps: usize,
    pub restorations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScstSummary {
    pub steps_run: usize,
    pub best_step: usize,
    pub best_dev_reward: f64,
    pub initial_dev_reward: f64,
    pub stopped_early: bool,
    pub restorations: usize,
    pub records: Vec<ScstRecord>,
}

#[derive(Default)]
struct Window {
    r: f64,
    b: f64,
    a: f64,
    mle: f64,
    pg: f64,
    steps: usize,
    failures: usize,
    aborted: usize,
}

impl Window {
    fn add(&mut self, s: &ScstBatchStats) {
        self.failures += s.failures;
        if s.aborted {
            self.aborted += 1;
            return;
        }
        self.r += s.sampled_reward;
        self.b += s.baseline_reward;
        self.a += s.advantage;
        self.mle += s.mle_loss;
        self.pg += s.pg_loss;
        self.steps += 1;
    }

    fn mean(&self, x: f64) -> f64 {
        if self.steps > 0 {
            x / self.steps as f64
        } else {
            0.0
        }
    }
}

/// Fine-tunes a warm-started `model` with SCST.
///
/// Evaluates on `dev` every `eval_every` steps, keeps the parameters with
/// the best dev sampled reward (the warm start included) and stops after
/// `patience` evaluations without improvement. A non-finite mixed loss
/// restores the last evaluated parameters and halves the policy-gradient
/// weight; one more after `max_restorations` aborts.
#[allow(clippy::too_many_arguments)]
pub fn train_scst<T: Scalar, R: SequenceReward + ?Sized>(
    model: &mut Seq2SeqModel<T>,
    vocab: &Vocabulary,
    train: &[EncodedPair],
    dev: &[EncodedPair],
    reward: &R,
    config: &ScstConfig,
    mut on_record: impl FnMut(&ScstRecord),
) -> Result<ScstSummary, ScstError> {
    config.validate()?;
    if train.len() < 100 {
        return Err(ScstError::InvalidConfig(format!("SCST needs at least 100 training pairs, got {}", train.len())));
    }
    let dev_eval = |m: &Seq2SeqModel<T>| evaluate_dev(m, vocab, dev, reward, config.temperature, config.token_budget, config.seed);
    let mut opt = Adam::new(config.adam.clone(), model.params());
    let mut stream = BatchStream::new(train, config.token_budget, config.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ SAMPLE_SEED_SALT);
    let mut pg_weight = 1.0 - config.mle_weight;

    let initial = dev_eval(model)?;
    log::info!("scst warm start: dev reward {:.4}, dev loss {:.4}", initial.sampled_reward, initial.mle_loss);
    let mut best: (ParamStore<T>, f64, usize) = (model.params().clone(), initial.sampled_reward, 0);
    let mut snapshot: (ParamStore<T>, Adam<T>) = (model.params().clone(), opt.clone());
    let (mut restorations, mut stale) = (0usize, 0usize);
    let mut window = Window::default();
    let mut records = Vec::new();
    let mut steps_run = 0;
    let mut stopped_early = false;
    for step in 1..=config.steps {
        steps_run = step;
        let indices = stream.next_indices();
        let (stats, grads) = scst_gradients(model, vocab, train, &indices, reward, config, pg_weight, &mut rng)?;
        match grads {
            None => window.add(&stats),
            Some(g) if stats.loss.is_finite() && g.all_finite() => {
                opt.step(model.params_mut(), &g);
                window.add(&stats);
            }
            Some(_) => {
                restorations += 1;
                if restorations > config.max_restorations {
                    return Err(ScstError::Diverged { step, restorations: restorations - 1 });
                }
                *model.params_mut() = snapshot.0.clone();
                opt = snapshot.1.clone();
                pg_weight /= 2.0;
                log::warn!("non-finite SCST loss at step {step}; restored, policy-gradient weight now {pg_weight}");
            }
        }
        if step % config.eval_every == 0 || step == config.steps {
            let d = dev_eval(model)?;
            let rec = ScstRecord {
                step,
                mean_sampled_reward: window.mean(window.r),
                baseline_reward: window.mean(window.b),
                advantage: window.mean(window.a),
                mle_loss: window.mean(window.mle),
                pg_loss: window.mean(window.pg),
                dev_sampled_reward: d.sampled_reward,
                dev_mle_loss: d.mle_loss,
                pg_weight,
                failures: window.failures,
                aborted_steps: window.aborted,
                restorations,
            };
            log::info!(
                "scst step {step}: reward {:.4} (baseline {:.4}), dev reward {:.4}, dev loss {:.4}",
                rec.mean_sampled_reward,
                rec.baseline_reward,
                rec.dev_sampled_reward,
                rec.dev_mle_loss
            );
            on_record(&rec);
            records.push(rec);
            window = Window::default();
            snapshot = (model.params().clone(), opt.clone());
            if d.sampled_reward > best.1 {
                best = (model.params().clone(), d.sampled_reward, step);
                stale = 0;
            } else {
                stale += 1;
                if stale >= config.patience {
                    stopped_early = step < config.steps;
                    break;
                }
            }
        }
    }
    *model.params_mut() = best.0;
    Ok(ScstSummary {
        steps_run,
        best_step: best.2,
        best_dev_reward: best.1,
        initial_dev_reward: initial.sampled_reward,
        stopped_early,
        restorations,
        records,
    })
}
