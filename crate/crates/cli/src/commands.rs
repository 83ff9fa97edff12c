use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use qraug::augmenter::{augment, merge_training_sets, PairScorers};
use qraug::corpus::{build_vocab, generate_synthetic_corpus, read_pairs, write_pairs, PairExample, Vocabulary};
use qraug::phonetics::PronunciationLexicon;
use qraug::pipeline::run_experiment_with_data;
use qraug::retrieval::{build_index, evaluate_p_at_k, parse_ks, RetrievalIndex, Retriever};
use qraug::rewards::{score_pair, train_semantic_encoder, RewardFn, SemanticEncoder};
use qraug::scst::train_scst;
use qraug::seq2seq::{encode_inverse_pairs, train_mle, Seq2SeqModel};
use serde::Serialize;
use serde_json::json;
use toml::Value;

use crate::config::{load, Config, Layers};
use crate::Command;

fn int(v: impl TryInto<i64>) -> Value {
    Value::Integer(v.try_into().unwrap_or(i64::MAX))
}

fn config(path: &Option<PathBuf>, flags: impl FnOnce(&mut Layers) -> Result<()>) -> Result<Config> {
    load(path.as_deref(), flags)
}

fn lexicon(path: &Option<PathBuf>) -> Result<PronunciationLexicon> {
    match path {
        Some(p) => PronunciationLexicon::from_file(p).with_context(|| format!("loading lexicon {}", p.display())),
        None => Ok(PronunciationLexicon::bundled()),
    }
}

fn pairs(path: &Path) -> Result<Vec<PairExample>> {
    read_pairs(path).with_context(|| format!("reading pairs {}", path.display()))
}

fn encoder(path: &Path) -> Result<SemanticEncoder> {
    SemanticEncoder::load(path).with_context(|| format!("loading encoder {}", path.display()))
}

/// Rewrites from a file of plain lines or JSON-lines pairs.
fn rewrites(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if line.starts_with('{') {
            let p: PairExample =
                serde_json::from_str(line).with_context(|| format!("{}: line {}", path.display(), i + 1))?;
            out.push(p.rewrite);
        } else {
            out.push(line.to_string());
        }
    }
    Ok(out)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<()> {
    let mut w = create(path)?;
    for r in rows {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(w.flush()?)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(w.flush()?)
}

fn vocab_for(path: &Option<PathBuf>, data: &[PairExample], min_count: usize) -> Result<Vocabulary> {
    match path {
        Some(p) => Vocabulary::load(p).with_context(|| format!("loading vocabulary {}", p.display())),
        None => Ok(build_vocab(data, min_count)?),
    }
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::GenCorpus { config: c, seed, n, out, lexicon: lex } => {
            let cfg = config(&c.config, |l| {
                l.set_opt("corpus.seed", seed.map(int))?;
                l.set_opt("corpus.n", n.map(int))
            })?;
            let lex = lexicon(&lex)?;
            let (pairs, report) = generate_synthetic_corpus(cfg.corpus.seed, cfg.corpus.n, &lex, &cfg.corpus.synthetic)?;
            write_pairs(&out, &pairs)?;
            log::info!("wrote {} pairs to {} ({:?})", pairs.len(), out.display(), report.per_tag);
        }
        Command::BuildVocab { config: c, input, min_count, out } => {
            let cfg = config(&c.config, |l| l.set_opt("vocab.min_count", min_count.map(int)))?;
            let vocab = build_vocab(&pairs(&input)?, cfg.vocab.min_count)?;
            vocab.save(&out)?;
            log::info!("wrote {} tokens to {}", vocab.len(), out.display());
        }
        Command::TrainMle { config: c, data, out_ckpt, dev, vocab, seed, steps, lr, metrics } => {
            let cfg = config(&c.config, |l| {
                l.set_opt("train.seed", seed.map(int))?;
                l.set_opt("train.steps", steps.map(int))?;
                l.set_opt("train.adam.lr", lr)
            })?;
            let train_pairs = pairs(&data)?;
            let vocab = vocab_for(&vocab, &train_pairs, cfg.vocab.min_count)?;
            let max_len = cfg.model.max_len;
            let train = encode_inverse_pairs(&train_pairs, &vocab, max_len)?;
            let dev = dev.map(|p| pairs(&p).and_then(|d| Ok(encode_inverse_pairs(&d, &vocab, max_len)?))).transpose()?;
            let mut model: Seq2SeqModel<f32> = Seq2SeqModel::new(cfg.model.clone(), vocab.len(), cfg.train.seed)?;
            let mut records = Vec::new();
            let summary = train_mle(&mut model, &train, dev.as_deref(), &cfg.train, false, |r| {
                log::info!("step {}: loss {:.4}{}", r.step, r.loss, r.dev_loss.map(|d| format!(", dev {d:.4}")).unwrap_or_default());
                records.push(r.clone());
            })?;
            model.save(&out_ckpt, &vocab)?;
            if let Some(m) = metrics {
                write_jsonl(&m, &records)?;
            }
            log::info!("final loss {:.4}; checkpoint {}", summary.final_loss, out_ckpt.display());
        }
        Command::TrainEncoder { config: c, data, out_ckpt, vocab, seed, steps, metrics } => {
            let cfg = config(&c.config, |l| {
                l.set_opt("encoder.seed", seed.map(int))?;
                l.set_opt("encoder.steps", steps.map(int))
            })?;
            let train = pairs(&data)?;
            let vocab = vocab_for(&vocab, &train, cfg.vocab.min_count)?;
            let (enc, records) = train_semantic_encoder::<f32>(&train, vocab, &cfg.encoder, |r| {
                log::info!("step {}: loss {:.4}", r.step, r.loss)
            })?;
            enc.save(&out_ckpt)?;
            if let Some(m) = metrics {
                write_jsonl(&m, &records)?;
            }
            log::info!("encoder checkpoint {}", out_ckpt.display());
        }
        Command::TrainScst { config: c, ckpt, data, out_ckpt, reward, alpha, dev, encoder: enc, lexicon: lex, seed, steps, metrics } => {
            let cfg = config(&c.config, |l| {
                l.set_opt("scst.reward", reward.map(|r| Value::String(r.as_str().into())))?;
                l.set_opt("scst.alpha", alpha)?;
                l.set_opt("scst.seed", seed.map(int))?;
                l.set_opt("scst.steps", steps.map(int))
            })?;
            let (mut model, vocab) = Seq2SeqModel::<f32>::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let max_len = model.config().max_len;
            let mut train = encode_inverse_pairs(&pairs(&data)?, &vocab, max_len)?;
            let dev = match dev {
                Some(p) => encode_inverse_pairs(&pairs(&p)?, &vocab, max_len)?,
                None => {
                    let hold = (train.len() / 20).max(1);
                    train.split_off(train.len() - hold)
                }
            };
            let lex = lexicon(&lex)?;
            let enc = enc.as_deref().map(encoder).transpose()?;
            if cfg.scst.reward.needs_encoder() && enc.is_none() {
                bail!("scst.reward = {} needs --encoder", cfg.scst.reward);
            }
            let reward = RewardFn::from_kind(cfg.scst.reward, cfg.scst.alpha, &lex, enc.as_ref())?;
            let mut records = Vec::new();
            let summary = train_scst(&mut model, &vocab, &train, &dev, &reward, &cfg.scst, |r| records.push(r.clone()))?;
            model.save(&out_ckpt, &vocab)?;
            if let Some(m) = metrics {
                write_jsonl(&m, &records)?;
            }
            log::info!(
                "dev reward {:.4} -> {:.4} (best step {}); checkpoint {}",
                summary.initial_dev_reward,
                summary.best_dev_reward,
                summary.best_step,
                out_ckpt.display()
            );
        }
        Command::Augment { config: c, ckpt, rewrites: input, mode, n_per_input, out, seed, temperature, beam_width, encoder: enc, lexicon: lex } => {
            let cfg = config(&c.config, |l| {
                l.set_opt("augment.mode", mode.map(|m| Value::String(m.as_str().into())))?;
                l.set_opt("augment.n_per_input", n_per_input.map(int))?;
                l.set_opt("augment.seed", seed.map(int))?;
                l.set_opt("augment.temperature", temperature)?;
                l.set_opt("augment.beam_width", beam_width.map(int))
            })?;
            let (model, vocab) = Seq2SeqModel::<f32>::load(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
            let lex = lexicon(&lex)?;
            let enc = enc.as_deref().map(encoder).transpose()?;
            let scorers = PairScorers { lexicon: Some(&lex), encoder: enc.as_ref() };
            let (synthetic, report) = augment(&model, &vocab, &rewrites(&input)?, &cfg.augment, scorers)?;
            write_pairs(&out, &synthetic)?;
            log::info!("{report:?}");
        }
        Command::ScoreRewards { pairs: input, lexicon: lex, encoder: enc, alpha, out } => {
            qraug::rewards::check_alpha(alpha)?;
            let lex = lexicon(&lex)?;
            let enc = enc.as_deref().map(encoder).transpose()?;
            let mut rows = Vec::new();
            for p in pairs(&input)? {
                let row = match &enc {
                    Some(e) => {
                        let s = score_pair(&p.request, &p.rewrite, &lex, e)?;
                        json!({ "request": p.request, "rewrite": p.rewrite, "r_p": s.r_p, "r_d": s.r_d, "r_c": s.combined(alpha) })
                    }
                    None => {
                        let r_p = RewardFn::<f32>::phonetic(&lex).score(&p.request, &p.rewrite)?;
                        json!({ "request": p.request, "rewrite": p.rewrite, "r_p": r_p })
                    }
                };
                rows.push(row);
            }
            write_jsonl(&out, &rows)?;
            log::info!("scored {} pairs", rows.len());
        }
        Command::Merge { a, b, out } => {
            let (merged, report) = merge_training_sets(&pairs(&a)?, &pairs(&b)?);
            write_pairs(&out, &merged)?;
            log::info!("{report:?}");
        }
        Command::EvalRetrieval { config: c, encoder: enc, index_data, test, ks, report, save_index } => {
            let cfg = config(&c.config, |_| Ok(()))?;
            let ks = match ks {
                Some(text) => parse_ks(&text)?,
                None => cfg.retrieval.ks.clone(),
            };
            let enc: Retriever = encoder(&enc)?;
            let index = if index_data.is_dir() {
                RetrievalIndex::load(&index_data, &enc)?
            } else {
                build_index(&enc, &rewrites(&index_data)?)?
            };
            if let Some(dir) = save_index {
                index.save(&dir)?;
            }
            let result = evaluate_p_at_k(&index, &pairs(&test)?, &ks)?;
            write_json(&report, &result)?;
            for (k, p) in &result.p_at_k {
                log::info!("{k} = {p:.4}");
            }
        }
        Command::RunExperiment { config: c, seed, no_augmentation, report, synthetic_out } => {
            let cfg = config(&c.config, |l| {
                l.set_opt("experiment.seed", seed.map(int))?;
                l.set_opt("experiment.augmentation", no_augmentation.then_some(false))
            })?;
            let (result, synthetic) = run_experiment_with_data(&cfg.experiment)?;
            write_json(&report, &result)?;
            if let Some(p) = synthetic_out {
                write_pairs(&p, &synthetic)?;
            }
        }
    }
    Ok(())
}
