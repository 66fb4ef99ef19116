//! Miner vs brute-force oracle on randomized documents, plus the per-span
//! filter invariants.

mod support;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spanret::mining::mine_document;
use spanret::tokenizer::Tokenizer;
use support::{brute_force_mine, canon_mined, random_document};

#[test]
fn miner_matches_oracle_on_random_documents() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x4D);
    for case in 0..60 {
        let passages = random_document(&mut rng, &format!("doc{case}"), 8, 40);
        let (mined, _) = mine_document(&passages, 2, 10);
        let got = canon_mined(&mined);
        let want = brute_force_mine(&passages, 2, 10);
        assert_eq!(got, want, "case {case} diverged from the oracle");
    }
}

#[test]
fn miner_matches_oracle_on_varied_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..30 {
        let passages = random_document(&mut rng, &format!("doc{case}"), 5, 25);
        for (lo, hi) in [(2, 3), (2, 5), (3, 10), (1, 4)] {
            let (mined, _) = mine_document(&passages, lo, hi);
            assert_eq!(
                canon_mined(&mined),
                brute_force_mine(&passages, lo, hi),
                "case {case} bounds {lo}..{hi}"
            );
        }
    }
}

#[test]
fn every_emitted_span_satisfies_all_filters() {
    let tok = Tokenizer::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..40 {
        let passages = random_document(&mut rng, &format!("doc{case}"), 8, 40);
        let (mined, _) = mine_document(&passages, 2, 10);
        for span in &mined {
            // length bounds
            assert!(span.tokens.len() >= 2 && span.tokens.len() <= 10);
            // cross-passage: at least two distinct passages
            assert!(span.passage_set.len() >= 2);
            // occurrences actually hold the span's tokens
            for occ in &span.occurrences {
                let passage = passages
                    .iter()
                    .find(|p| p.passage_id == occ.passage_id)
                    .unwrap();
                let window: Vec<&str> = passage.tokens[occ.start..occ.start + occ.length]
                    .iter()
                    .map(|t| t.surface.as_str())
                    .collect();
                let expect: Vec<&str> = span.tokens.iter().map(|s| s.as_str()).collect();
                assert_eq!(window, expect);
            }
            // not all stop words
            assert!(span.tokens.iter().any(|t| !tok.is_stopword(t)));
        }
    }
}

#[test]
fn no_emitted_span_is_a_uniformly_extendable_sub_span() {
    // maximality, checked directly on the emitted set: no span may extend by
    // one identical token at every occurrence and stay within bounds
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for case in 0..40 {
        let passages = random_document(&mut rng, &format!("doc{case}"), 8, 40);
        let (mined, _) = mine_document(&passages, 2, 10);
        for span in &mined {
            if span.tokens.len() == 10 {
                continue;
            }
            let by_id = |pid: &str| passages.iter().find(|p| p.passage_id == pid).unwrap();
            let lefts: Vec<Option<String>> = span
                .occurrences
                .iter()
                .map(|o| {
                    o.start
                        .checked_sub(1)
                        .map(|i| by_id(&o.passage_id).tokens[i].surface.clone())
                })
                .collect();
            let uniform_left =
                lefts.iter().all(|l| l.is_some()) && lefts.windows(2).all(|w| w[0] == w[1]);
            let rights: Vec<Option<String>> = span
                .occurrences
                .iter()
                .map(|o| {
                    by_id(&o.passage_id)
                        .tokens
                        .get(o.start + o.length)
                        .map(|t| t.surface.clone())
                })
                .collect();
            let uniform_right =
                rights.iter().all(|r| r.is_some()) && rights.windows(2).all(|w| w[0] == w[1]);
            assert!(
                !uniform_left && !uniform_right,
                "span {:?} is uniformly extendable",
                span.tokens
            );
        }
    }
}
