use qraug::autodiff::gradcheck::{check_gradients, GradCheckOptions};
use qraug::autodiff::Tape;
use qraug::corpus::{build_vocab, generate_synthetic_corpus, PairExample, SyntheticConfig, TokenId, Vocabulary};
use qraug::phonetics::{phonetic_reward, PronunciationLexicon};
use qraug::rewards::{
    combined_reward, contrastive_batches, cosine, dissimilarity_from_embeddings, semantic_dissimilarity, train_semantic_encoder,
    EncoderConfig, RewardError, RewardFn, RewardKind, RewardScores, SemanticEncoder,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(seed: u64, n: usize) -> Vec<PairExample> {
    generate_synthetic_corpus(seed, n, &PronunciationLexicon::bundled(), &SyntheticConfig::default()).unwrap().0
}

fn random_utterance(vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> String {
    let words = vocab.corpus_tokens();
    let n = rng.random_range(1..=10);
    (0..n).map(|_| words[rng.random_range(0..words.len())].as_str()).collect::<Vec<_>>().join(" ")
}

#[test]
fn dissimilarity_examples() {
    assert_eq!(dissimilarity_from_embeddings(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
    assert_eq!(dissimilarity_from_embeddings(&[1.0, 0.0], &[0.0, 3.0]), 1.0);
    // Anti-parallel vectors would give 2 before the clamp.
    assert_eq!(dissimilarity_from_embeddings(&[1.0, -1.0], &[-2.0, 2.0]), 1.0);
    assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
}

#[test]
fn combined_examples() {
    assert!((RewardScores { r_p: 0.4, r_d: 0.6 }.combined(0.5) - 0.5).abs() < 1e-12);
    let pairs = corpus(1, 200);
    let vocab = build_vocab(&pairs, 1).unwrap();
    let lex = PronunciationLexicon::bundled();
    let enc: SemanticEncoder = SemanticEncoder::new(EncoderConfig::default(), vocab, 3).unwrap();
    let (c, s) = ("play love by wale", "play love by whale");
    let r_p = phonetic_reward(c, s, &lex);
    let r_d = RewardFn::semantic(&lex, &enc).score(c, s).unwrap();
    assert_eq!(combined_reward(c, s, 1.0, &lex, &enc).unwrap(), r_p);
    assert_eq!(combined_reward(c, s, 0.0, &lex, &enc).unwrap(), r_d);
    assert_eq!(RewardFn::<f32>::phonetic(&lex).score(c, s).unwrap(), r_p);
    for bad in [-0.1, 1.5, f64::NAN] {
        assert!(matches!(combined_reward(c, s, bad, &lex, &enc), Err(RewardError::InvalidAlpha(_))));
        assert!(RewardFn::combined(bad, &lex, &enc).is_err());
    }
    assert!(RewardFn::<f32>::from_kind(RewardKind::Semantic, 0.5, &lex, None).is_err());
    assert_eq!("combined".parse::<RewardKind>().unwrap(), RewardKind::Combined);
    assert!("bleu".parse::<RewardKind>().is_err());
}

#[test]
fn empty_utterances_rejected() {
    let pairs = corpus(2, 100);
    let lex = PronunciationLexicon::bundled();
    let enc: SemanticEncoder = SemanticEncoder::new(EncoderConfig::default(), build_vocab(&pairs, 1).unwrap(), 0).unwrap();
    for r in [RewardFn::<f32>::phonetic(&lex), RewardFn::semantic(&lex, &enc), RewardFn::combined(0.5, &lex, &enc).unwrap()] {
        assert!(matches!(r.score("", "play music"), Err(RewardError::EmptyUtterance)));
        assert!(matches!(r.score("play music", "  "), Err(RewardError::EmptyUtterance)));
    }
}

#[test]
fn reward_contracts_fuzz() {
    let pairs = corpus(3, 500);
    let vocab = build_vocab(&pairs, 1).unwrap();
    let lex = PronunciationLexicon::bundled();
    let enc: SemanticEncoder = SemanticEncoder::new(EncoderConfig::default(), vocab.clone(), 5).unwrap();
    let (phon, sem) = (RewardFn::<f32>::phonetic(&lex), RewardFn::semantic(&lex, &enc));
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..10_000 {
        let (a, b) = (random_utterance(&vocab, &mut rng), random_utterance(&vocab, &mut rng));
        let r_p = phon.score(&a, &b).unwrap();
        let r_d = sem.score(&a, &b).unwrap();
        let lo = RewardFn::combined(0.0, &lex, &enc).unwrap().score(&a, &b).unwrap();
        let mid = RewardFn::combined(0.5, &lex, &enc).unwrap().score(&a, &b).unwrap();
        let hi = RewardFn::combined(1.0, &lex, &enc).unwrap().score(&a, &b).unwrap();
        for r in [r_p, r_d, lo, mid, hi] {
            assert!((0.0..=1.0).contains(&r), "{a:?} / {b:?}: {r}");
        }
        assert!((mid - 0.5 * (lo + hi)).abs() < 1e-9, "{a:?} / {b:?}");
        if i % 10 == 0 {
            assert_eq!(phon.score(&a, &a).unwrap(), 0.0);
            assert_eq!(sem.score(&a, &a).unwrap(), 0.0, "{a:?}");
        }
    }
}

#[test]
fn encoder_config_errors() {
    let v = Vocabulary::from_tokens(["a", "b"]).unwrap();
    let one = EncoderConfig { batch_size: 1, ..EncoderConfig::default() };
    assert!(matches!(SemanticEncoder::<f32>::new(one.clone(), v.clone(), 0), Err(RewardError::InvalidConfig(_))));
    let pairs = [PairExample::new("a", "b", None).unwrap()];
    assert!(train_semantic_encoder::<f32>(&pairs, v.clone(), &EncoderConfig::default(), |_| {}).is_err());
    let pairs = [PairExample::new("a", "b", None).unwrap(), PairExample::new("b", "a", None).unwrap()];
    assert!(train_semantic_encoder::<f32>(&pairs, v.clone(), &one, |_| {}).is_err());
    let enc: SemanticEncoder = SemanticEncoder::new(EncoderConfig::default(), v, 0).unwrap();
    assert!(matches!(enc.embed(" "), Err(RewardError::EmptyUtterance)));
}

#[test]
fn contrastive_gradients_match_finite_differences() {
    let v = Vocabulary::from_tokens((0..12).map(|i| format!("w{i}"))).unwrap();
    let cfg = EncoderConfig { d_emb: 6, d_out: 5, scale: 3.0, ..EncoderConfig::default() };
    let mut enc: SemanticEncoder<f64> = SemanticEncoder::new(cfg, v, 4).unwrap();
    let q: Vec<Vec<TokenId>> = vec![vec![4, 5, 6], vec![7], vec![8, 9, 4, 4]];
    let k: Vec<Vec<TokenId>> = vec![vec![4, 6], vec![10, 11], vec![3, 9]];
    let qs: Vec<&[TokenId]> = q.iter().map(Vec::as_slice).collect();
    let ks: Vec<&[TokenId]> = k.iter().map(Vec::as_slice).collect();
    let probe = enc.clone();
    let report = check_gradients(enc.params_mut(), &GradCheckOptions::default(), |tape: &mut Tape<'_, f64>| {
        probe.contrastive_loss(tape, &qs, &ks)
    })
    .unwrap();
    assert!(report.checked > 80, "{}", report.checked);
    assert!(report.max_rel_error < 1e-4, "{report:?}");
}

#[test]
fn untrained_loss_is_near_log_batch() {
    let v = Vocabulary::from_tokens((0..400).map(|i| format!("w{i}"))).unwrap();
    // Random cosines spread by about 1/sqrt(d); at unit scale the logits are
    // near uniform. Larger scales add a Jensen gap above ln b.
    let cfg = EncoderConfig { d_emb: 256, d_out: 256, scale: 1.0, ..EncoderConfig::default() };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let b = 16;
    let mut total = 0.0;
    for seed in 0..10 {
        let enc: SemanticEncoder<f64> = SemanticEncoder::new(cfg.clone(), v.clone(), seed).unwrap();
        let mk = |rng: &mut ChaCha8Rng| -> Vec<Vec<TokenId>> {
            (0..b).map(|_| (0..rng.random_range(3..8)).map(|_| rng.random_range(4..v.len())).collect()).collect()
        };
        let (q, k) = (mk(&mut rng), mk(&mut rng));
        let qs: Vec<&[TokenId]> = q.iter().map(Vec::as_slice).collect();
        let ks: Vec<&[TokenId]> = k.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::inference(enc.params());
        let l = enc.contrastive_loss(&mut tape, &qs, &ks).unwrap();
        total += tape.item(l);
    }
    let mean = total / 10.0;
    assert!((mean - (b as f64).ln()).abs() < 0.05, "mean init loss {mean}, ln b {}", (b as f64).ln());
}

#[test]
fn batches_hold_distinct_requests_and_rewrites() {
    let pairs = corpus(4, 600);
    let vocab = build_vocab(&pairs, 1).unwrap();
    let enc: SemanticEncoder = SemanticEncoder::new(EncoderConfig::default(), vocab, 0).unwrap();
    let seqs: Vec<_> = pairs.iter().map(|p| (enc.tokenize(&p.request).unwrap(), enc.tokenize(&p.rewrite).unwrap())).collect();
    let keys: Vec<(&[TokenId], &[TokenId])> = seqs.iter().map(|(q, d)| (q.content(), d.content())).collect();
    let batches = contrastive_batches(&keys, 32, &mut ChaCha8Rng::seed_from_u64(1));
    let mut seen = vec![false; keys.len()];
    for b in &batches {
        assert!(b.len() >= 2 && b.len() <= 32);
        let mut q: Vec<_> = b.iter().map(|&i| keys[i].0).collect();
        let mut d: Vec<_> = b.iter().map(|&i| keys[i].1).collect();
        q.sort();
        q.dedup();
        d.sort();
        d.dedup();
        assert_eq!((q.len(), d.len()), (b.len(), b.len()));
        for &i in b {
            assert!(!seen[i]);
            seen[i] = true;
        }
    }
    assert!(seen.iter().filter(|&&s| s).count() > keys.len() * 9 / 10);
}

#[test]
fn trained_encoder_separates_pairs() {
    let train = corpus(10, 3000);
    let held_out = corpus(11, 400);
    let vocab = build_vocab(&train, 1).unwrap();
    let cfg = EncoderConfig::default();
    let (enc, records) = train_semantic_encoder::<f32>(&train, vocab, &cfg, |_| {}).unwrap();
    assert!(records.last().unwrap().loss < records[0].loss);
    let emb = |t: &str| enc.embed(t).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut paired, mut cross) = (0.0, 0.0);
    for p in &held_out {
        let other = &held_out[rng.random_range(0..held_out.len())];
        paired += cosine(&emb(&p.request), &emb(&p.rewrite));
        cross += cosine(&emb(&p.request), &emb(&other.rewrite));
    }
    let n = held_out.len() as f64;
    let gap = paired / n - cross / n;
    assert!(gap >= 0.2, "paired {:.3} cross {:.3}", paired / n, cross / n);

    // Frozen: bitwise-identical repeated embeddings and checkpoint round trip.
    let text = &held_out[0].rewrite;
    assert_eq!(emb(text), emb(text));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.json");
    enc.save(&path).unwrap();
    let back: SemanticEncoder = SemanticEncoder::load(&path).unwrap();
    assert_eq!(back.embed(text).unwrap(), emb(text));
    let (c, s) = (enc.tokenize(&held_out[1].request).unwrap(), enc.tokenize(&held_out[1].rewrite).unwrap());
    assert_eq!(semantic_dissimilarity(&c, &s, &back).unwrap(), semantic_dissimilarity(&c, &s, &enc).unwrap());

    // Same seed, same encoder.
    let again = train_semantic_encoder::<f32>(&train, enc.vocab().clone(), &cfg, |_| {}).unwrap().0;
    assert_eq!(again.embed(text).unwrap(), emb(text));
}

#[test]
fn subword_features_link_unseen_spellings() {
    let vocab = build_vocab(&corpus(3, 200), 1).unwrap();
    let plain = SemanticEncoder::<f64>::new(EncoderConfig::default(), vocab.clone(), 0).unwrap();
    let cfg = EncoderConfig { subword_buckets: 500, ..EncoderConfig::default() };
    let sub = SemanticEncoder::<f64>::new(cfg, vocab.clone(), 0).unwrap();

    // Without buckets, features are the vocabulary encoding.
    assert_eq!(plain.tokenize("call peter").unwrap(), vocab.encode("call peter", plain.config().max_len).unwrap());

    let seq = sub.tokenize("call pieter").unwrap();
    let words = vocab.encode("call pieter", sub.config().max_len).unwrap();
    // Words first, then the trigrams of "<call>" and "<pieter>", then EOS.
    assert_eq!(seq.ids[..2], words.ids[..2]);
    assert_eq!(seq.ids.len(), 2 + 4 + 6 + 1);
    assert_eq!(*seq.ids.last().unwrap(), *words.ids.last().unwrap());
    assert!(seq.content()[2..].iter().all(|&id| (vocab.len()..vocab.len() + 500).contains(&id)));

    // Shared trigrams give an unseen spelling a representation near its source.
    let grams = |t: &str| sub.tokenize(t).unwrap().content()[1..].to_vec();
    let (a, b) = (grams("pieter"), grams("peter"));
    assert!(a.iter().filter(|id| b.contains(id)).count() >= 3);
    assert!(cosine(&sub.embed("pieter").unwrap(), &sub.embed("peter").unwrap()) > cosine(&plain.embed("pieter").unwrap(), &plain.embed("peter").unwrap()));
}

