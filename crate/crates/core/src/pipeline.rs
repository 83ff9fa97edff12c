//! End-to-end experiments: the augmentation pipeline (generate, train the
//! inverse model, fine-tune with rewards, augment, merge, train retrievers,
//! compare P@K) and the reward-driven pattern-acquisition check.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::augmenter::{augment, merge_training_sets, AugmentConfig, AugmentError, AugmentReport, DecodeMode, MergeReport, PairScorers};
use crate::autodiff::AdamConfig;
use crate::corpus::{
    build_vocab, generate_synthetic_corpus, CorpusError, Grammar, PairExample, SyntheticConfig, SyntheticGenerator, Vocabulary,
};
use crate::phonetics::PronunciationLexicon;
use crate::retrieval::{build_index, evaluate_p_at_k, p_at_k_key, train_retriever, EvalReport, RetrievalError};
use crate::rewards::{train_semantic_encoder, EncoderConfig, RewardError, RewardFn, RewardKind, SemanticEncoder};
use crate::scst::{evaluate_dev, train_scst, DevEvaluation, ScstConfig, ScstError};
use crate::seq2seq::{encode_inverse_pairs, train_mle, EncodedPair, ModelConfig, Seq2SeqError, Seq2SeqModel, TrainConfig};

const GOLDEN_SALT: u64 = 0x9e37_79b9_7f4a_7c15;
const TEST_SALT: u64 = 0xd1b5_4a32_d192_ed03;
const REWARD_ENCODER_SALT: u64 = 0x2545_f491_4f6c_dd1d;
const RETRIEVER_SALT: u64 = 0x5851_f42d_4c95_7f2d;
/// Misrecognised words are mostly out of vocabulary; trigram features
/// let the retriever match them to their neighbours.
pub const RETRIEVER_SUBWORD_BUCKETS: usize = 4000;
const GOLDEN_DRAWS_PER_REWRITE: usize = 50;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("{0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Seq2Seq(#[from] Seq2SeqError),
    #[error(transparent)]
    Scst(#[from] ScstError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Augment(#[from] AugmentError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

/// Inverse-model architecture sized for one CPU core.
pub fn desk_model() -> ModelConfig {
    ModelConfig { d_tok: 64, d_hid: 64, d_ff: 128, ..ModelConfig::default() }
}

fn desk_mle() -> TrainConfig {
    TrainConfig { steps: 2000, token_budget: 512, adam: AdamConfig { lr: 1e-3, warmup_steps: 100, ..AdamConfig::default() }, log_every: 250, ..TrainConfig::default() }
}

fn desk_scst(steps: usize) -> ScstConfig {
    ScstConfig { steps, token_budget: 512, eval_every: 100, adam: AdamConfig { lr: 5e-5, warmup_steps: 0, ..AdamConfig::default() }, ..ScstConfig::default() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives every stage; the seeds inside the stage sections are ignored.
    pub seed: u64,
    /// Labelled (request, rewrite) pairs available for training.
    pub n_original: usize,
    /// Unpaired clean rewrites fed to the augmenter.
    pub n_golden: usize,
    pub n_test: usize,
    /// Tail of the original pairs held out for model selection of the augmenter.
    pub n_dev: usize,
    /// When off, no synthetic pairs are produced and both arms coincide.
    pub augmentation: bool,
    /// Adds every golden rewrite as an identity pair to the inverse model's
    /// MLE data, so it learns to reproduce words absent from the original
    /// pairs. SCST still trains on the original pairs only.
    pub copy_golden: bool,
    pub use_scst: bool,
    pub vocab_min_count: usize,
    pub ks: Vec<usize>,
    pub corpus: SyntheticConfig,
    pub model: ModelConfig,
    pub mle: TrainConfig,
    pub scst: ScstConfig,
    pub reward_encoder: EncoderConfig,
    pub augment: AugmentConfig,
    pub retriever: EncoderConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_original: 1000,
            n_golden: 4000,
            n_test: 1000,
            n_dev: 100,
            augmentation: true,
            copy_golden: true,
            use_scst: true,
            vocab_min_count: 1,
            ks: vec![1, 5],
            corpus: SyntheticConfig::default(),
            model: desk_model(),
            mle: desk_mle(),
            scst: desk_scst(200),
            reward_encoder: EncoderConfig::default(),
            augment: AugmentConfig { mode: DecodeMode::Beam, ..AugmentConfig::default() },
            retriever: EncoderConfig { subword_buckets: RETRIEVER_SUBWORD_BUCKETS, ..EncoderConfig::default() },
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::InvalidConfig(m));
        if self.n_original < 2 || self.n_test == 0 {
            return bad("n_original must be at least 2 and n_test positive".into());
        }
        if self.augmentation && self.n_golden == 0 {
            return bad("n_golden must be positive when augmentation is on".into());
        }
        if self.augmentation && (self.n_dev == 0 || self.n_dev >= self.n_original) {
            return bad(format!("n_dev must be in 1..{}, got {}", self.n_original, self.n_dev));
        }
        if self.ks.is_empty() || self.ks.contains(&0) {
            return bad("ks must be a non-empty list of positive cutoffs".into());
        }
        self.corpus.validate()?;
        self.model.validate()?;
        self.mle.validate()?;
        if self.use_scst {
            self.scst.validate()?;
        }
        self.augment.validate()?;
        self.reward_encoder.validate()?;
        self.retriever.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScstOutcome {
    pub steps_run: usize,
    pub best_step: usize,
    pub initial_dev_reward: f64,
    pub best_dev_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AugmenterOutcome {
    pub train_pairs: usize,
    pub dev_pairs: usize,
    pub vocab_size: usize,
    pub mle_final_loss: f64,
    pub dev_loss: Option<f64>,
    pub scst: Option<ScstOutcome>,
    pub augment: AugmentReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DataSizes {
    pub original: usize,
    pub golden_inputs: usize,
    pub synthetic: usize,
    pub merged: usize,
    pub test: usize,
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentReport {
    pub seed: u64,
    pub sizes: DataSizes,
    pub augmenter: Option<AugmenterOutcome>,
    pub merge: MergeReport,
    pub training_only: EvalReport,
    pub training_synthetic: EvalReport,
    /// Training+Synthetic minus Training-only, per cutoff.
    pub delta: BTreeMap<String, f64>,
    /// `delta` divided by the Training-only precision.
    pub relative_delta: BTreeMap<String, f64>,
}

fn distinct_rewrites<'a>(pairs: impl IntoIterator<Item = &'a PairExample>) -> Vec<String> {
    let mut seen = HashSet::new();
    pairs.into_iter().filter(|p| seen.insert(p.rewrite.as_str())).map(|p| p.rewrite.clone()).collect()
}

/// The first `n` distinct rewrites of a generator stream; the requests are
/// discarded, as golden rewrites arrive unpaired.
pub fn golden_rewrites(seed: u64, n: usize, lex: &PronunciationLexicon, config: &SyntheticConfig) -> Result<Vec<String>, PipelineError> {
    let grammar = Grammar::bundled();
    let cap = n.saturating_mul(GOLDEN_DRAWS_PER_REWRITE);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    for p in SyntheticGenerator::new(seed, cap, config.clone(), &grammar, lex)? {
        if out.len() == n {
            break;
        }
        if seen.insert(p.rewrite.clone()) {
            out.push(p.rewrite);
        }
    }
    if out.len() < n {
        log::warn!("grammar yielded only {} distinct golden rewrites in {cap} draws", out.len());
    }
    Ok(out)
}

/// Identity pairs that let a vocabulary cover text seen only unpaired.
fn identity_pairs(texts: &[String]) -> Vec<PairExample> {
    texts.iter().map(|t| PairExample::new(t, t, None).expect("rewrites are non-empty")).collect()
}

fn vocab_over(pairs: &[&[PairExample]], min_count: usize) -> Result<Vocabulary, CorpusError> {
    build_vocab(pairs.iter().flat_map(|p| p.iter()), min_count)
}

/// Trains the inverse model on the original pairs, optionally fine-tunes it
/// with SCST, and decodes synthetic requests for the golden rewrites.
pub fn run_augmenter(
    config: &ExperimentConfig,
    original: &[PairExample],
    golden: &[String],
    lex: &PronunciationLexicon,
) -> Result<(Vec<PairExample>, AugmenterOutcome), PipelineError> {
    let seed = config.seed;
    let (train_pairs, dev_pairs) = original.split_at(original.len() - config.n_dev);
    let golden_pairs = identity_pairs(golden);
    let vocab = vocab_over(&[original, &golden_pairs], config.vocab_min_count)?;
    let max_len = config.model.max_len;
    let train = encode_inverse_pairs(train_pairs, &vocab, max_len)?;
    let dev = encode_inverse_pairs(dev_pairs, &vocab, max_len)?;
    let mle_data = if config.copy_golden {
        let mut d = train.clone();
        d.extend(encode_inverse_pairs(&golden_pairs, &vocab, max_len)?);
        d
    } else {
        train.clone()
    };
    let mut model: Seq2SeqModel<f32> = Seq2SeqModel::new(config.model.clone(), vocab.len(), seed)?;
    let mle = TrainConfig { seed, eval_every: config.mle.steps, ..config.mle.clone() };
    log::info!("augmenter: MLE on {} pairs, {} steps", mle_data.len(), mle.steps);
    let summary = train_mle(&mut model, &mle_data, Some(&dev), &mle, false, |r| {
        log::info!("mle step {}: loss {:.4}{}", r.step, r.loss, r.dev_loss.map(|d| format!(" dev {d:.4}")).unwrap_or_default())
    })?;
    let dev_loss = summary.records.iter().rev().find_map(|r| r.dev_loss);

    let scst = if config.use_scst {
        let sc = ScstConfig { seed, ..config.scst.clone() };
        let encoder: Option<SemanticEncoder<f32>> = if sc.reward.needs_encoder() {
            let enc_cfg = EncoderConfig { seed: seed ^ REWARD_ENCODER_SALT, ..config.reward_encoder.clone() };
            let enc_vocab = vocab_over(&[train_pairs], config.vocab_min_count)?;
            Some(train_semantic_encoder(train_pairs, enc_vocab, &enc_cfg, |_| {})?.0)
        } else {
            None
        };
        let reward = RewardFn::from_kind(sc.reward, sc.alpha, lex, encoder.as_ref())?;
        log::info!("augmenter: SCST with the {} reward, {} steps", sc.reward, sc.steps);
        let s = train_scst(&mut model, &vocab, &train, &dev, &reward, &sc, |_| {})?;
        Some(ScstOutcome {
            steps_run: s.steps_run,
            best_step: s.best_step,
            initial_dev_reward: s.initial_dev_reward,
            best_dev_reward: s.best_dev_reward,
        })
    } else {
        None
    };

    let aug_cfg = AugmentConfig { seed, ..config.augment.clone() };
    let scorers = PairScorers::<f32> { lexicon: Some(lex), encoder: None };
    let (synthetic, report) = augment(&model, &vocab, golden, &aug_cfg, scorers)?;
    let outcome = AugmenterOutcome {
        train_pairs: train.len(),
        dev_pairs: dev.len(),
        vocab_size: vocab.len(),
        mle_final_loss: summary.final_loss,
        dev_loss,
        scst,
        augment: report,
    };
    Ok((synthetic, outcome))
}

/// Trains a retriever on `pairs` and scores it on the shared index. The
/// vocabulary covers the arm's pairs and the index, so both arms can
/// represent every candidate.
pub fn evaluate_arm(
    config: &ExperimentConfig,
    pairs: &[PairExample],
    index_texts: &[String],
    test: &[PairExample],
) -> Result<EvalReport, PipelineError> {
    let index_pairs = identity_pairs(index_texts);
    let vocab = vocab_over(&[pairs, &index_pairs], config.vocab_min_count)?;
    let cfg = EncoderConfig { seed: config.seed ^ RETRIEVER_SALT, ..config.retriever.clone() };
    let (encoder, _) = train_retriever::<f32>(pairs, vocab, &cfg, |r| log::debug!("retriever step {}: loss {:.4}", r.step, r.loss))?;
    let index = build_index(&encoder, index_texts)?;
    Ok(evaluate_p_at_k(&index, test, &config.ks)?)
}

/// Training-only versus Training+Synthetic retrieval on a test set whose
/// corruptions come from a seed no training stage sees.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentReport, PipelineError> {
    Ok(run_experiment_with_data(config)?.0)
}

/// `run_experiment`, also returning the synthetic pairs.
/// Inputs shared by both arms of an experiment.
#[derive(Debug, Clone)]
pub struct ExperimentData {
    pub original: Vec<PairExample>,
    pub golden: Vec<String>,
    pub test: Vec<PairExample>,
    /// Distinct rewrites of the original, golden and test sets.
    pub index_texts: Vec<String>,
}

pub fn experiment_data(config: &ExperimentConfig, lex: &PronunciationLexicon) -> Result<ExperimentData, PipelineError> {
    let seed = config.seed;
    let (original, _) = generate_synthetic_corpus(seed, config.n_original, lex, &config.corpus)?;
    let (test, _) = generate_synthetic_corpus(seed ^ TEST_SALT, config.n_test, lex, &config.corpus)?;
    let golden = if config.augmentation { golden_rewrites(seed ^ GOLDEN_SALT, config.n_golden, lex, &config.corpus)? } else { Vec::new() };
    let golden_pairs = identity_pairs(&golden);
    let index_texts = distinct_rewrites(original.iter().chain(&golden_pairs).chain(&test));
    Ok(ExperimentData { original, golden, test, index_texts })
}

/// `run_experiment`, also returning the synthetic pairs.
pub fn run_experiment_with_data(config: &ExperimentConfig) -> Result<(ExperimentReport, Vec<PairExample>), PipelineError> {
    config.validate()?;
    let lex = PronunciationLexicon::bundled();
    let seed = config.seed;
    let ExperimentData { original, golden, test, index_texts } = experiment_data(config, &lex)?;
    log::info!(
        "experiment seed {seed}: {} original pairs, {} golden rewrites, {} test queries, {} indexed rewrites",
        original.len(),
        golden.len(),
        test.len(),
        index_texts.len()
    );

    let (synthetic, augmenter) = if config.augmentation {
        let (s, o) = run_augmenter(config, &original, &golden, &lex)?;
        (s, Some(o))
    } else {
        (Vec::new(), None)
    };
    let (merged, merge) = merge_training_sets(&original, &synthetic);
    // The merge drops repeated pairs; the baseline gets the same treatment
    // so the arms differ only by the synthetic pairs.
    let (baseline, _) = merge_training_sets(&original, &[]);

    log::info!("arm Training-only: {} pairs", baseline.len());
    let training_only = evaluate_arm(config, &baseline, &index_texts, &test)?;
    log::info!("arm Training+Synthetic: {} pairs", merged.len());
    let training_synthetic = evaluate_arm(config, &merged, &index_texts, &test)?;

    let mut delta = BTreeMap::new();
    let mut relative_delta = BTreeMap::new();
    for &k in &config.ks {
        let key = p_at_k_key(k);
        let (a, b) = (training_only.p_at_k[&key], training_synthetic.p_at_k[&key]);
        delta.insert(key.clone(), b - a);
        relative_delta.insert(key, if a > 0.0 { (b - a) / a } else { 0.0 });
    }
    for (k, d) in &delta {
        log::info!("{k}: {:.4} -> {:.4} ({d:+.4})", training_only.p_at_k[k], training_synthetic.p_at_k[k]);
    }
    let report = ExperimentReport {
        seed,
        sizes: DataSizes {
            original: original.len(),
            golden_inputs: golden.len(),
            synthetic: synthetic.len(),
            merged: merged.len(),
            test: test.len(),
            index: index_texts.len(),
        },
        augmenter,
        merge,
        training_only,
        training_synthetic,
        delta,
        relative_delta,
    };
    Ok((report, synthetic))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatternConfig {
    pub seed: u64,
    pub n_pairs: usize,
    /// Size of the held-out scoring split and of the SCST selection split.
    pub n_dev: usize,
    pub corpus: SyntheticConfig,
    pub model: ModelConfig,
    /// MLE warm start shared by both arms.
    pub warm_start: TrainConfig,
    /// The SCST arm; the MLE-only arm continues for the same number of
    /// steps with the same token budget and optimizer settings.
    pub scst: ScstConfig,
}

impl Default for PatternConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_pairs: 10_000,
            n_dev: 500,
            corpus: SyntheticConfig::default(),
            model: desk_model(),
            warm_start: desk_mle(),
            scst: ScstConfig { reward: RewardKind::Phonetic, ..desk_scst(300) },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PatternReport {
    pub warm_start: DevEvaluation,
    pub mle_only: DevEvaluation,
    pub scst: DevEvaluation,
    /// Dev sampled phonetic reward, SCST minus MLE-only.
    pub reward_gain: f64,
    /// Relative increase of dev MLE loss, SCST over MLE-only.
    pub loss_degradation: f64,
}

/// Does reward fine-tuning move the sampled outputs toward the rewarded
/// pattern more than further MLE training for the same step budget?
pub fn run_pattern_acquisition(config: &PatternConfig) -> Result<PatternReport, PipelineError> {
    if config.n_dev == 0 || 2 * config.n_dev >= config.n_pairs {
        return Err(PipelineError::InvalidConfig(format!("n_dev must be in 1..{}, got {}", config.n_pairs.div_ceil(2), config.n_dev)));
    }
    if config.scst.reward != RewardKind::Phonetic {
        return Err(PipelineError::InvalidConfig("pattern acquisition measures the phonetic reward".into()));
    }
    config.scst.validate()?;
    let lex = PronunciationLexicon::bundled();
    let seed = config.seed;
    let (pairs, _) = generate_synthetic_corpus(seed, config.n_pairs, &lex, &config.corpus)?;
    let vocab = build_vocab(&pairs, 1)?;
    let encoded: Vec<EncodedPair> = encode_inverse_pairs(&pairs, &vocab, config.model.max_len)?;
    // SCST selects its checkpoint on `select`; both arms are scored on `dev`.
    let (train, rest) = encoded.split_at(encoded.len() - 2 * config.n_dev);
    let (select, dev) = rest.split_at(config.n_dev);
    let reward = RewardFn::<f32>::phonetic(&lex);
    let sc = ScstConfig { seed, ..config.scst.clone() };
    let eval = |m: &Seq2SeqModel<f32>| evaluate_dev(m, &vocab, dev, &reward, sc.temperature, sc.token_budget, seed);

    let mut model: Seq2SeqModel<f32> = Seq2SeqModel::new(config.model.clone(), vocab.len(), seed)?;
    let warm = TrainConfig { seed, ..config.warm_start.clone() };
    train_mle(&mut model, train, None, &warm, false, |r| log::info!("warm start step {}: loss {:.4}", r.step, r.loss))?;
    let warm_start = eval(&model)?;

    let mut mle_model = model.clone();
    let more = TrainConfig { steps: sc.steps, token_budget: sc.token_budget, adam: sc.adam.clone(), seed: seed.wrapping_add(1), ..warm };
    train_mle(&mut mle_model, train, None, &more, false, |_| {})?;
    let mle_only = eval(&mle_model)?;

    train_scst(&mut model, &vocab, train, select, &reward, &sc, |_| {})?;
    let scst = eval(&model)?;
    Ok(PatternReport {
        warm_start,
        mle_only,
        scst,
        reward_gain: scst.sampled_reward - mle_only.sampled_reward,
        loss_degradation: scst.mle_loss / mle_only.mle_loss - 1.0,
    })
}
