use proptest::prelude::*;
use qraug::phonetics::{
    edit_distance, normalized_levenshtein, phonetic_reward, LetterRules, PhonemeSequence, PronunciationLexicon, ARPABET,
};

/// Textbook recursive definition, exponential and independent of the DP.
fn naive(a: &[u8], b: &[u8]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = naive(ra, rb) + usize::from(x != y);
            sub.min(naive(ra, b) + 1).min(naive(a, rb) + 1)
        }
    }
}

/// Same recursion memoized on suffix lengths, for sequences too long for [`naive`].
fn memo(a: &[u8], b: &[u8]) -> usize {
    fn go(a: &[u8], b: &[u8], cache: &mut std::collections::HashMap<(usize, usize), usize>) -> usize {
        if let Some(&d) = cache.get(&(a.len(), b.len())) {
            return d;
        }
        let d = match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((x, ra)), Some((y, rb))) => {
                let sub = go(ra, rb, cache) + usize::from(x != y);
                sub.min(go(ra, b, cache) + 1).min(go(a, rb, cache) + 1)
            }
        };
        cache.insert((a.len(), b.len()), d);
        d
    }
    go(a, b, &mut Default::default())
}

fn seq(max: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(0u8..5, 0..=max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1500))]

    #[test]
    fn dp_matches_naive_recursion(a in seq(8), b in seq(8)) {
        prop_assert_eq!(edit_distance(&a, &b), naive(&a, &b));
    }

    #[test]
    fn symmetric_and_zero_iff_equal(a in seq(10), b in seq(10)) {
        let d = normalized_levenshtein(&a, &b);
        prop_assert_eq!(d, normalized_levenshtein(&b, &a));
        prop_assert_eq!(d == 0.0, a == b);
        prop_assert!((0.0..=1.0).contains(&d));
    }

    #[test]
    fn raw_distance_triangle(a in seq(8), b in seq(8), c in seq(8)) {
        prop_assert!(edit_distance(&a, &c) <= edit_distance(&a, &b) + edit_distance(&b, &c));
    }
}

#[test]
fn kitten_sitting_oracle() {
    let d = normalized_levenshtein(b"kitten", b"sitting");
    assert_eq!(d, naive(b"kitten", b"sitting") as f64 / 7.0);
    assert_eq!(d, 3.0 / 7.0);
}

#[test]
fn g2p_lookups_and_empty() {
    let lex = PronunciationLexicon::bundled();
    assert!(lex.g2p("").is_empty());
    assert!(lex.g2p("   ").is_empty());
    assert_eq!(lex.g2p("close").to_string(), "K L OW S");
    assert_eq!(lex.g2p("Close").to_string(), "K L OW S");
    assert_eq!(lex.g2p("play love").to_string(), "P L EY L AH V");
}

#[test]
fn oov_golden() {
    let lex = PronunciationLexicon::bundled();
    assert!(lex.lookup("blorp").is_none());
    // b, l, "or", p through the bundled rule table.
    assert_eq!(lex.g2p("blorp").to_string(), "B L AO R P");
    assert_eq!(lex.g2p("blorp"), lex.g2p("blorp"));
    assert_eq!(LetterRules::bundled().apply("shtion").to_string(), "SH SH AH N");
}

#[test]
fn reserved_markers_are_silent() {
    let lex = PronunciationLexicon::bundled();
    assert_eq!(lex.g2p("play <unk> music"), lex.g2p("play music"));
}

#[test]
fn bundled_lexicon_invariants() {
    let lex = PronunciationLexicon::bundled();
    assert!(lex.len() > 3000, "{}", lex.len());
    for (w, p) in lex.iter() {
        assert_eq!(w, w.to_lowercase());
        assert!(!p.is_empty(), "{w}");
        for ph in p.as_slice() {
            assert!(ARPABET.contains(&ph.symbol()));
        }
    }
}

#[test]
fn homophones_and_neighbors() {
    let lex = PronunciationLexicon::bundled();
    assert!(lex.homophones("wale").contains(&"whale"));
    let near = lex.phoneme_neighbors("close", 1);
    assert!(near.contains(&"clothes") || !near.is_empty());
    for w in &near {
        assert_eq!(edit_distance(lex.g2p(w).as_slice(), lex.g2p("close").as_slice()), 1);
    }
}

#[test]
fn reward_examples() {
    let lex = PronunciationLexicon::bundled();
    let x = "what is your favorite close";
    assert_eq!(phonetic_reward(x, x, &lex), 0.0);
    let y = "what is your favorite clothes";
    let (a, b) = (lex.g2p(y), lex.g2p(x));
    let oracle = {
        let ids = |p: &PhonemeSequence| p.as_slice().iter().map(|ph| ARPABET.iter().position(|s| *s == ph.symbol()).unwrap() as u8).collect::<Vec<_>>();
        memo(&ids(&a), &ids(&b)) as f64 / a.len().max(b.len()) as f64
    };
    let r = phonetic_reward(y, x, &lex);
    assert_eq!(r, oracle);
    assert!(r > 0.0 && r < 0.2, "{r}");
    // Equal-length, fully disjoint pronunciations.
    assert_eq!(phonetic_reward("see", "two", &lex), 1.0);
}
