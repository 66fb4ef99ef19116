//! Shared test oracles. Every oracle here recomputes its answer through an
//! independent path from the implementation it checks.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spanret::corpus::{passage_id, Corpus, Passage};
use spanret::encoder::{EncoderModel, ParamSet};
use spanret::tokenizer::Tokenizer;
use spanret::train::{batch_loss, TrainBatch};
use std::collections::{BTreeMap, BTreeSet};

pub type CanonSpan = (Vec<String>, Vec<(String, usize, usize)>);

/// Brute-force recurring-span oracle: enumerate every n-gram, group by
/// content, apply the filters, and test maximality by direct extension
/// checks against the grouped occurrence lists.
pub fn brute_force_mine(passages: &[Passage], min_len: usize, max_len: usize) -> BTreeSet<CanonSpan> {
    let tokenizer = Tokenizer::new();
    let mut groups: BTreeMap<Vec<String>, Vec<(usize, usize)>> = BTreeMap::new();
    for (pi, passage) in passages.iter().enumerate() {
        let surfaces: Vec<String> = passage.tokens.iter().map(|t| t.surface.clone()).collect();
        for n in min_len..=max_len.min(surfaces.len()) {
            for start in 0..=surfaces.len() - n {
                groups
                    .entry(surfaces[start..start + n].to_vec())
                    .or_default()
                    .push((pi, start));
            }
        }
    }

    let neighbor = |pi: usize, idx: isize| -> Option<String> {
        if idx < 0 {
            return None;
        }
        passages[pi].tokens.get(idx as usize).map(|t| t.surface.clone())
    };

    let mut out = BTreeSet::new();
    for (tokens, occs) in &groups {
        let distinct: BTreeSet<usize> = occs.iter().map(|&(pi, _)| pi).collect();
        if distinct.len() < 2 {
            continue;
        }
        if tokens.iter().all(|t| tokenizer.is_stopword(t)) {
            continue;
        }
        // maximality: a uniform one-token extension within the length bound
        // disqualifies the gram
        let mut maximal = true;
        if tokens.len() + 1 <= max_len {
            let lefts: Vec<Option<String>> = occs
                .iter()
                .map(|&(pi, start)| neighbor(pi, start as isize - 1))
                .collect();
            if lefts.iter().all(|l| l.is_some()) && lefts.windows(2).all(|w| w[0] == w[1]) {
                maximal = false;
            }
            let rights: Vec<Option<String>> = occs
                .iter()
                .map(|&(pi, start)| neighbor(pi, (start + tokens.len()) as isize))
                .collect();
            if rights.iter().all(|r| r.is_some()) && rights.windows(2).all(|w| w[0] == w[1]) {
                maximal = false;
            }
        }
        if !maximal {
            continue;
        }
        let mut canon: Vec<(String, usize, usize)> = occs
            .iter()
            .map(|&(pi, start)| (passages[pi].passage_id.clone(), start, tokens.len()))
            .collect();
        canon.sort();
        out.insert((tokens.clone(), canon));
    }
    out
}

/// Canonical form of mined spans for set comparison with the oracle.
pub fn canon_mined(spans: &[spanret::mining::RecurringSpan]) -> BTreeSet<CanonSpan> {
    spans
        .iter()
        .map(|s| {
            let mut occs: Vec<(String, usize, usize)> = s
                .occurrences
                .iter()
                .map(|o| (o.passage_id.clone(), o.start, o.length))
                .collect();
            occs.sort();
            (s.tokens.clone(), occs)
        })
        .collect()
}

/// Random documents over a small vocabulary (stop words included) so that
/// recurrences, stopword-only grams and extension collisions all occur.
pub fn random_document(rng: &mut ChaCha8Rng, doc: &str, max_passages: usize, max_tokens: usize) -> Vec<Passage> {
    let vocab = [
        "the", "of", "and", "ember", "quill", "harbor", "lantern", "mossy", "drift", "keel",
        "aurora", "thicket",
    ];
    let tok = Tokenizer::new();
    let n_passages = rng.gen_range(1..=max_passages);
    (0..n_passages)
        .map(|pos| {
            let n_tokens = rng.gen_range(1..=max_tokens);
            let text: Vec<&str> = (0..n_tokens)
                .map(|_| vocab[rng.gen_range(0..vocab.len())])
                .collect();
            Passage {
                passage_id: passage_id(doc, pos as u32),
                doc_id: doc.to_string(),
                title: String::new(),
                position: pos as u32,
                tokens: tok.tokenize(&text.join(" ")),
            }
        })
        .collect()
}

/// Direct-formula BM25 oracle: per passage, loop distinct query terms in
/// first-appearance order, recount tf by scanning tokens, apply the formula.
pub fn bm25_oracle(
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    k1: f64,
    b: f64,
    query: &[spanret::tokenizer::Token],
) -> Vec<(String, f64)> {
    use spanret::corpus::passage_text_with_title;
    let texts: Vec<Vec<String>> = corpus
        .passages()
        .iter()
        .map(|p| {
            passage_text_with_title(p, tokenizer)
                .into_iter()
                .map(|t| t.surface)
                .collect()
        })
        .collect();
    let n = texts.len() as f64;
    let avgdl = texts.iter().map(|t| t.len() as f64).sum::<f64>() / n;

    let mut distinct: Vec<&str> = Vec::new();
    for t in query {
        if !distinct.contains(&t.surface.as_str()) {
            distinct.push(&t.surface);
        }
    }

    corpus
        .passages()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let dl = texts[i].len() as f64;
            let mut score = 0.0;
            for term in &distinct {
                let df = texts.iter().filter(|t| t.iter().any(|s| s == term)).count() as f64;
                if df == 0.0 {
                    continue;
                }
                let tf = texts[i].iter().filter(|s| s.as_str() == *term).count() as f64;
                if tf == 0.0 {
                    continue;
                }
                let idf = (1.0 + (n - df + 0.5) / (df + 0.5)).ln();
                score += idf * tf / (tf + k1 * (1.0 - b + b * dl / avgdl));
            }
            (p.passage_id.clone(), score)
        })
        .collect()
}

/// Rank (passage id, score) pairs the way every retriever does: descending
/// score, ties by ascending id.
pub fn rank_oracle(mut scored: Vec<(String, f64)>, k: usize) -> Vec<(String, f64)> {
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    scored
}

/// Dense softmax cross-entropy oracle: materialize the full score matrix
/// with naive dot loops and compute -log(exp(s_ii)/sum) directly, without
/// log-sum-exp rearrangement.
pub fn dense_loss_oracle(model: &EncoderModel, batch: &TrainBatch) -> f64 {
    let dot = |a: &[f64], bv: &[f64]| -> f64 {
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += a[i] * bv[i];
        }
        acc
    };
    let enc = |ids: &Vec<u32>| -> Vec<f64> {
        let (v, _) = model.forward(ids, None);
        v.to_vec()
    };
    let queries: Vec<Vec<f64>> = batch.queries.iter().map(enc).collect();
    let mut candidates: Vec<Vec<f64>> = batch.positives.iter().map(enc).collect();
    if let Some(negs) = &batch.negatives {
        candidates.extend(negs.iter().map(enc));
    }
    let m = queries.len();
    let mut total = 0.0;
    for i in 0..m {
        let scores: Vec<f64> = candidates.iter().map(|c| dot(&queries[i], c)).collect();
        let denom: f64 = scores.iter().map(|s| s.exp()).sum();
        total += -(scores[i].exp() / denom).ln();
    }
    total / m as f64
}

/// Per-tensor-group finite-difference gradient check: relative L2 error of
/// (analytic - central difference) per parameter group.
pub fn fd_group_errors(
    model: &EncoderModel,
    batch: &TrainBatch,
    eps: f64,
) -> Vec<(String, f64)> {
    let (_, analytic) = spanret::train::batch_backward(model, batch, None).unwrap();
    let mut probe = model.clone();
    let group_count = analytic.tensors().len();
    let mut errors = Vec::with_capacity(group_count);
    for gi in 0..group_count {
        let (name, an_data) = {
            let t = analytic.tensors();
            (t[gi].0.clone(), t[gi].1.to_vec())
        };
        let len = an_data.len();
        let mut fd = vec![0.0; len];
        for j in 0..len {
            let orig = {
                let mut tensors = probe.params.tensors_mut();
                let v = tensors[gi].1[j];
                tensors[gi].1[j] = v + eps;
                v
            };
            let plus = batch_loss(&probe, batch, None).unwrap().loss;
            {
                let mut tensors = probe.params.tensors_mut();
                tensors[gi].1[j] = orig - eps;
            }
            let minus = batch_loss(&probe, batch, None).unwrap().loss;
            {
                let mut tensors = probe.params.tensors_mut();
                tensors[gi].1[j] = orig;
            }
            fd[j] = (plus - minus) / (2.0 * eps);
        }
        let diff_norm: f64 = fd
            .iter()
            .zip(&an_data)
            .map(|(f, a)| (f - a) * (f - a))
            .sum::<f64>()
            .sqrt();
        let fd_norm: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
        let an_norm: f64 = an_data.iter().map(|v| v * v).sum::<f64>().sqrt();
        let denom = fd_norm.max(an_norm).max(1e-12);
        errors.push((name, diff_norm / denom));
    }
    errors
}

pub fn zeros_like(model: &EncoderModel) -> ParamSet {
    ParamSet::zeros(&model.config)
}

/// Hash a file's bytes for artifact-determinism checks.
pub fn file_hash(path: &std::path::Path) -> String {
    spanret::artifact::file_sha256(path).unwrap()
}
