use std::collections::BTreeSet;

use proptest::prelude::*;
use qraug::corpus::{build_vocab, generate_synthetic_corpus, PairExample, SyntheticConfig};
use qraug::phonetics::PronunciationLexicon;
use qraug::retrieval::{build_index, evaluate_p_at_k, parse_ks, train_retriever, RetrievalIndex, Retriever};
use qraug::rewards::{cosine, EncoderConfig};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn corpus(seed: u64, n: usize) -> Vec<PairExample> {
    generate_synthetic_corpus(seed, n, &PronunciationLexicon::bundled(), &SyntheticConfig::default()).unwrap().0
}

fn untrained(pairs: &[PairExample], seed: u64) -> Retriever {
    Retriever::new(EncoderConfig::default(), build_vocab(pairs, 1).unwrap(), seed).unwrap()
}

/// Distinct rewrites whose word multisets differ, so no two share a
/// mean-pooled embedding.
fn distinct_rewrites(pairs: &[PairExample], n: usize) -> Vec<String> {
    let mut bags = BTreeSet::new();
    let mut out = Vec::new();
    for p in pairs {
        let mut words: Vec<&str> = p.rewrite.split(' ').collect();
        words.sort_unstable();
        if bags.insert(words.join(" ")) {
            out.push(p.rewrite.clone());
        }
        if out.len() == n {
            break;
        }
    }
    assert_eq!(out.len(), n);
    out
}

#[test]
fn ranking_matches_brute_force_oracle() {
    let pairs = corpus(1, 2000);
    let enc = untrained(&pairs, 3);
    let mut seen = BTreeSet::new();
    let items: Vec<String> = pairs.iter().map(|p| p.rewrite.clone()).filter(|r| seen.insert(r.clone())).take(100).collect();
    assert_eq!(items.len(), 100);
    let index = build_index(&enc, &items).unwrap();
    assert_eq!(index.len(), 100);
    let raw: Vec<Vec<f64>> = items.iter().map(|t| enc.embed(t).unwrap()).collect();
    for p in pairs.iter().skip(1000).take(100) {
        let q = enc.embed(&p.request).unwrap();
        let mut oracle: Vec<(usize, f64)> = raw.iter().map(|r| cosine(&q, r)).enumerate().collect();
        oracle.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let got = index.search(&p.request, 100).unwrap();
        let order: Vec<usize> = got.iter().map(|g| g.0).collect();
        assert_eq!(order, oracle.iter().map(|o| o.0).collect::<Vec<_>>());
        for ((_, a), (_, b)) in got.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12, "{a} {b}");
        }
        let qn = &index.embed_queries(&[&p.request]).unwrap()[0];
        for (rank, &i) in order.iter().enumerate() {
            assert_eq!(index.rank_of(qn, i), rank);
        }
    }
}

#[test]
fn index_dedups_normalizes_and_self_retrieves() {
    let pairs = corpus(2, 1000);
    let enc = untrained(&pairs, 4);
    let items = distinct_rewrites(&pairs, 50);
    let mut with_dups: Vec<String> = items.iter().chain(&items[..10]).cloned().collect();
    with_dups.push(format!("  {}  ", items[3].to_uppercase()));
    let index = build_index(&enc, &with_dups).unwrap();
    assert_eq!(index.strings(), &items[..]);
    for i in 0..index.len() {
        let norm: f64 = index.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-6);
    }
    for (i, r) in items.iter().enumerate() {
        assert_eq!(index.search(r, 1).unwrap()[0].0, i);
    }
    let empty: Vec<String> = Vec::new();
    assert!(build_index(&enc, &empty).is_err());

    let test: Vec<PairExample> = items.iter().map(|r| PairExample::new(r, r, Some("none")).unwrap()).collect();
    let report = evaluate_p_at_k(&index, &test, &[1, 5]).unwrap();
    assert_eq!((report.p(1), report.p(5)), (Some(1.0), Some(1.0)));
    assert!(evaluate_p_at_k(&index, &[], &[1]).is_err());
    assert!(evaluate_p_at_k(&index, &test, &[0]).is_err());
}

#[test]
fn missing_gold_counts_as_miss() {
    let pairs = corpus(3, 500);
    let enc = untrained(&pairs, 5);
    let items = distinct_rewrites(&pairs, 20);
    let index = build_index(&enc, &items).unwrap();
    let mut test: Vec<PairExample> = items[..4].iter().map(|r| PairExample::new(r, r, Some("a")).unwrap()).collect();
    test.push(PairExample::new(&items[0], "not in the index", Some("b")).unwrap());
    let report = evaluate_p_at_k(&index, &test, &[5, 1]).unwrap();
    assert_eq!(report.queries, 5);
    assert_eq!(report.gold_missing, 1);
    assert_eq!(report.p(1), Some(0.8));
    assert_eq!(report.per_tag["a"].p_at_k["p@1"], 1.0);
    assert_eq!(report.per_tag["b"].p_at_k["p@5"], 0.0);
    assert_eq!(report.per_tag.values().map(|t| t.queries).sum::<usize>(), 5);
}

#[test]
fn random_encoder_p_at_1_is_chance() {
    let pairs = corpus(4, 3000);
    let vocab = build_vocab(&pairs, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut hits, mut trials) = (0usize, 0usize);
    for seed in 0..200 {
        let enc = Retriever::<f32>::new(EncoderConfig::default(), vocab.clone(), seed).unwrap();
        let mut pool = distinct_rewrites(&pairs[(seed as usize * 13) % 2000..], 20);
        pool.shuffle(&mut rng);
        let (items, queries) = pool.split_at(10);
        let index = build_index(&enc, items).unwrap();
        // Gold labels independent of the queries.
        let test: Vec<PairExample> =
            queries.iter().map(|q| PairExample::new(q, &items[rng.random_range(0..10)], None).unwrap()).collect();
        let report = evaluate_p_at_k(&index, &test, &[1]).unwrap();
        hits += (report.p(1).unwrap() * 10.0).round() as usize;
        trials += 10;
    }
    let p = hits as f64 / trials as f64;
    assert!((p - 0.1).abs() < 0.03, "{p}");
}

#[test]
fn added_items_bound_rank_changes() {
    let pairs = corpus(5, 2000);
    let enc = untrained(&pairs, 6);
    let all = distinct_rewrites(&pairs, 120);
    let (base, extra) = all.split_at(60);
    let small = build_index(&enc, base).unwrap();
    let big = build_index(&enc, &all).unwrap();
    for p in pairs.iter().skip(1500).take(50) {
        let q = &small.embed_queries(&[&p.request]).unwrap()[0];
        for gold in 0..small.len() {
            let (r0, r1) = (small.rank_of(q, gold), big.rank_of(q, gold));
            assert!(r1 >= r0 && r1 <= r0 + extra.len());
            // Only strictly less similar additions: the rank is unchanged.
            let t = small.scores(q)[gold];
            let lower: Vec<String> = (small.len()..big.len()).filter(|&i| big.scores(q)[i] < t).map(|i| all[i].clone()).collect();
            let mixed: Vec<String> = base.iter().cloned().chain(lower).collect();
            assert_eq!(build_index(&enc, &mixed).unwrap().rank_of(q, gold), r0);
        }
    }
}

#[test]
fn saved_index_round_trips() {
    let pairs = corpus(6, 500);
    let enc = untrained(&pairs, 7);
    let items = distinct_rewrites(&pairs, 30);
    let index = build_index(&enc, &items).unwrap();
    let dir = tempfile::tempdir().unwrap();
    index.save(dir.path()).unwrap();
    let back = RetrievalIndex::load(dir.path(), &enc).unwrap();
    assert_eq!(back.strings(), index.strings());
    for p in &pairs[..20] {
        assert_eq!(back.search(&p.request, 5).unwrap(), index.search(&p.request, 5).unwrap());
    }
    let narrow = Retriever::<f32>::new(EncoderConfig { d_out: 8, ..EncoderConfig::default() }, enc.vocab().clone(), 0).unwrap();
    assert!(RetrievalIndex::load(dir.path(), &narrow).is_err());
    assert!(RetrievalIndex::load(&dir.path().join("missing"), &enc).is_err());
}

#[test]
fn ks_parsing() {
    assert_eq!(parse_ks("5, 1,5").unwrap(), vec![1, 5]);
    assert!(parse_ks("1,x").is_err());
    assert!(parse_ks("0").is_err());
}

#[test]
fn trained_retriever_ranks_pairs_above_strangers() {
    let train = corpus(10, 3000);
    let held_out = corpus(11, 400);
    let cfg = EncoderConfig::default();
    let vocab = build_vocab(&train, 1).unwrap();
    assert!(train_retriever::<f32>(&train, vocab.clone(), &EncoderConfig { batch_size: 1, ..cfg.clone() }, |_| {}).is_err());
    assert!(train_retriever::<f32>(&train[..1], vocab.clone(), &cfg, |_| {}).is_err());
    let (enc, records) = train_retriever::<f32>(&train, vocab.clone(), &cfg, |_| {}).unwrap();
    assert!(records.last().unwrap().loss < records[0].loss);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut wins = 0;
    for p in &held_out {
        let other = loop {
            let o = &held_out[rng.random_range(0..held_out.len())];
            if o.rewrite != p.rewrite {
                break o;
            }
        };
        let q = enc.embed(&p.request).unwrap();
        if cosine(&q, &enc.embed(&p.rewrite).unwrap()) > cosine(&q, &enc.embed(&other.rewrite).unwrap()) {
            wins += 1;
        }
    }
    assert!(wins as f64 >= 0.8 * held_out.len() as f64, "{wins}/{}", held_out.len());

    // Retrieval beats the untrained encoder on the same held-out queries.
    let rewrites: Vec<&str> = held_out.iter().map(|p| p.rewrite.as_str()).collect();
    let ks = [1, 5, 10];
    let trained = evaluate_p_at_k(&build_index(&enc, &rewrites).unwrap(), &held_out, &ks).unwrap();
    let base_enc = untrained(&train, 0);
    let base = evaluate_p_at_k(&build_index(&base_enc, &rewrites).unwrap(), &held_out, &ks).unwrap();
    assert!(trained.p(1).unwrap() > base.p(1).unwrap(), "{trained:?} {base:?}");

    let again = train_retriever::<f32>(&train, vocab, &cfg, |_| {}).unwrap().0;
    assert_eq!(again.embed(&held_out[0].request).unwrap(), enc.embed(&held_out[0].request).unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn p_at_k_is_monotone(seed in 0u64..1000, n_items in 1usize..40, n_queries in 1usize..30) {
        let pairs = corpus(seed, 200);
        let enc = untrained(&pairs, seed);
        let items: Vec<&str> = pairs.iter().take(n_items).map(|p| p.rewrite.as_str()).collect();
        let index = build_index(&enc, &items).unwrap();
        let test: Vec<PairExample> = pairs.iter().rev().take(n_queries).cloned().collect();
        let ks: Vec<usize> = (1..=12).collect();
        let report = evaluate_p_at_k(&index, &test, &ks).unwrap();
        let ps: Vec<f64> = ks.iter().map(|&k| report.p(k).unwrap()).collect();
        prop_assert!(ps.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(ps.iter().all(|p| (0.0..=1.0).contains(p)));
        for tag in report.per_tag.values() {
            let ps: Vec<f64> = ks.iter().map(|&k| tag.p_at_k[&format!("p@{k}")]).collect();
            prop_assert!(ps.windows(2).all(|w| w[0] <= w[1]));
        }
    }
}
