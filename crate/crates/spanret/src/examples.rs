//! Pseudo-example synthesis: recurring spans become (query, positive,
//! negative) training triples via a randomized query transformation.
//!
//! For a span S occurring in passage q, window modes draw a window length
//! uniformly from {5..30}, clamp it to [|S|, |q|], pick a window containing S
//! uniformly, and either keep S in the window or delete it. Prefix mode takes
//! a random-length slice ending right before S. Whole-passage-mask keeps the
//! full passage with the S occurrence replaced by one `<mask>` token.

use crate::artifact::{self, Header, UpstreamRef};
use crate::corpus::{Corpus, Passage};
use crate::error::{Error, Result};
use crate::mining::{SpanOccurrence, SpanStore};
use crate::tokenizer::Token;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

pub const EXAMPLES_KIND: &str = "examples";
pub const EXAMPLES_VERSION: u32 = 1;

/// Window lengths are drawn uniformly from this range before clamping.
pub const WINDOW_MIN: usize = 5;
pub const WINDOW_MAX: usize = 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformMode {
    WindowAlternate,
    WindowKeep,
    WindowRemove,
    Prefix,
    WholePassageMask,
}

impl TransformMode {
    pub const ALL: [TransformMode; 5] = [
        TransformMode::WindowAlternate,
        TransformMode::WindowKeep,
        TransformMode::WindowRemove,
        TransformMode::Prefix,
        TransformMode::WholePassageMask,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TransformMode::WindowAlternate => "window_alternate",
            TransformMode::WindowKeep => "window_keep",
            TransformMode::WindowRemove => "window_remove",
            TransformMode::Prefix => "prefix",
            TransformMode::WholePassageMask => "whole_passage_mask",
        }
    }

    fn is_window(&self) -> bool {
        matches!(
            self,
            TransformMode::WindowAlternate | TransformMode::WindowKeep | TransformMode::WindowRemove
        )
    }
}

impl std::str::FromStr for TransformMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<TransformMode> {
        TransformMode::ALL
            .iter()
            .copied()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig {
                msg: format!(
                    "unknown transform mode {s:?}; expected one of {}",
                    TransformMode::ALL.map(|m| m.name()).join(", ")
                ),
            })
    }
}

/// RNG bookkeeping: enough to locate the draw that produced an example.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub base_seed: u64,
    pub doc_seed: u64,
    pub span_draw: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoExample {
    pub query: Vec<String>,
    pub positive_id: String,
    pub negative_id: Option<String>,
    pub span: Vec<String>,
    pub span_kept: bool,
    pub seed_record: SeedRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerateConfig {
    pub mode: TransformMode,
    /// 0 or 1 sampled negatives per query.
    pub negatives_per_query: u8,
    /// Spans sampled per document, without replacement.
    pub per_doc_cap: usize,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig {
            mode: TransformMode::WindowAlternate,
            negatives_per_query: 1,
            per_doc_cap: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerateStats {
    pub emitted: u64,
    pub skipped_no_negative: u64,
    pub skipped_span_too_long: u64,
    pub skipped_empty_query: u64,
    pub skipped_prefix_at_start: u64,
}

/// Valid window start offsets: windows of length `window_len` inside a
/// passage of `passage_len` tokens that fully contain the span.
pub fn valid_window_starts(
    occ_start: usize,
    span_len: usize,
    window_len: usize,
    passage_len: usize,
) -> std::ops::RangeInclusive<usize> {
    let lo = (occ_start + span_len).saturating_sub(window_len);
    let hi = occ_start.min(passage_len - window_len);
    lo..=hi
}

/// Apply the query transformation. Returns the query tokens and whether the
/// span was kept, or None when the example must be skipped.
pub fn transform_query(
    q: &Passage,
    occ: &SpanOccurrence,
    mode: TransformMode,
    rng: &mut ChaCha8Rng,
) -> Option<(Vec<Token>, bool)> {
    let len = q.tokens.len();
    assert!(occ.start + occ.length <= len, "occurrence outside passage");
    match mode {
        TransformMode::WindowAlternate | TransformMode::WindowKeep | TransformMode::WindowRemove => {
            if occ.length > WINDOW_MAX {
                return None;
            }
            let raw: usize = rng.gen_range(WINDOW_MIN..=WINDOW_MAX);
            let window_len = raw.clamp(occ.length, len.max(occ.length)).min(len);
            let starts = valid_window_starts(occ.start, occ.length, window_len, len);
            let start = rng.gen_range(starts);
            let keep = match mode {
                TransformMode::WindowAlternate => rng.gen_bool(0.5),
                TransformMode::WindowKeep => true,
                TransformMode::WindowRemove => false,
                _ => unreachable!(),
            };
            let window = &q.tokens[start..start + window_len];
            if keep {
                Some((window.to_vec(), true))
            } else {
                let span_off = occ.start - start;
                let mut out = window[..span_off].to_vec();
                out.extend_from_slice(&window[span_off + occ.length..]);
                if out.is_empty() {
                    None
                } else {
                    Some((out, false))
                }
            }
        }
        TransformMode::Prefix => {
            if occ.start == 0 {
                return None;
            }
            let take = rng.gen_range(1..=occ.start);
            Some((q.tokens[occ.start - take..occ.start].to_vec(), false))
        }
        TransformMode::WholePassageMask => {
            let mut out = q.tokens[..occ.start].to_vec();
            out.push(Token::mask());
            out.extend_from_slice(&q.tokens[occ.start + occ.length..]);
            Some((out, false))
        }
    }
}

fn doc_seed(base_seed: u64, doc_id: &str) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(base_seed.to_le_bytes());
    hasher.update(doc_id.as_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Generate pseudo examples for the whole corpus. Fully deterministic given
/// (corpus, store, config): documents are visited in corpus order, each with
/// an rng derived from (seed, doc id).
pub fn generate(
    corpus: &Corpus,
    store: &SpanStore,
    config: &GenerateConfig,
) -> Result<(Vec<PseudoExample>, GenerateStats)> {
    if config.negatives_per_query > 1 {
        return Err(Error::InvalidConfig {
            msg: "negatives_per_query must be 0 or 1".to_string(),
        });
    }
    if config.per_doc_cap == 0 {
        return Err(Error::InvalidConfig {
            msg: "per_doc_cap must be >= 1".to_string(),
        });
    }
    store.check_against(corpus)?;

    let mut out = Vec::new();
    let mut stats = GenerateStats::default();
    for (doc_id, passages) in corpus.docs_in_order() {
        let spans = store.doc_spans(doc_id);
        if spans.is_empty() {
            continue;
        }
        let dseed = doc_seed(config.seed, doc_id);
        let mut rng = ChaCha8Rng::seed_from_u64(dseed);

        // sample span indices without replacement (partial Fisher-Yates)
        let mut indices: Vec<usize> = (0..spans.len()).collect();
        let take = config.per_doc_cap.min(spans.len());
        for i in 0..take {
            let j = rng.gen_range(i..indices.len());
            indices.swap(i, j);
        }

        for (draw, &si) in indices[..take].iter().enumerate() {
            let span = &spans[si];
            let in_span: HashSet<&str> = span.passage_set.iter().map(|s| s.as_str()).collect();
            let negative_pool: Vec<&Passage> = passages
                .iter()
                .filter(|p| !in_span.contains(p.passage_id.as_str()))
                .collect();
            if config.negatives_per_query == 1 && negative_pool.is_empty() {
                stats.skipped_no_negative += 1;
                continue;
            }

            let q_id = &span.passage_set[rng.gen_range(0..span.passage_set.len())];
            let positives: Vec<&String> =
                span.passage_set.iter().filter(|p| *p != q_id).collect();
            let positive_id = positives[rng.gen_range(0..positives.len())].clone();
            let negative_id = if config.negatives_per_query == 1 {
                Some(negative_pool[rng.gen_range(0..negative_pool.len())].passage_id.clone())
            } else {
                None
            };

            let q = corpus.by_id(q_id).ok_or_else(|| Error::StoreCorpusMismatch {
                doc_id: doc_id.to_string(),
            })?;
            let occs: Vec<&SpanOccurrence> = span
                .occurrences
                .iter()
                .filter(|o| &o.passage_id == q_id)
                .collect();
            let occ = occs[rng.gen_range(0..occs.len())];

            match transform_query(q, occ, config.mode, &mut rng) {
                Some((query, span_kept)) => {
                    stats.emitted += 1;
                    out.push(PseudoExample {
                        query: query.into_iter().map(|t| t.surface).collect(),
                        positive_id,
                        negative_id,
                        span: span.tokens.clone(),
                        span_kept,
                        seed_record: SeedRecord {
                            base_seed: config.seed,
                            doc_seed: dseed,
                            span_draw: draw as u32,
                        },
                    });
                }
                None => match config.mode {
                    TransformMode::Prefix => stats.skipped_prefix_at_start += 1,
                    m if m.is_window() && occ.length > WINDOW_MAX => {
                        stats.skipped_span_too_long += 1
                    }
                    _ => stats.skipped_empty_query += 1,
                },
            }
        }
    }
    Ok((out, stats))
}

pub fn save<W: Write, C: Serialize>(
    w: &mut W,
    examples: &[PseudoExample],
    config: &C,
    upstream: BTreeMap<String, UpstreamRef>,
) -> Result<()> {
    let header = Header::new(EXAMPLES_KIND, EXAMPLES_VERSION, config, upstream);
    artifact::write_jsonl_header(w, &header)?;
    for ex in examples {
        let line = serde_json::to_string(ex).expect("example serializes");
        writeln!(w, "{line}").map_err(|e| Error::io("<examples>", e))?;
    }
    Ok(())
}

pub fn load<R: BufRead>(mut r: R) -> Result<(Vec<PseudoExample>, Header)> {
    let header = artifact::read_jsonl_header(&mut r, EXAMPLES_KIND, EXAMPLES_VERSION)?;
    let mut out = Vec::new();
    for (line_no, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<examples>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: PseudoExample = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: line_no + 2,
            msg: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok((out, header))
}

pub fn load_path(path: &Path) -> Result<(Vec<PseudoExample>, Header)> {
    load(artifact::open_reader(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::passage_id;
    use crate::mining::mine_corpus;
    use crate::tokenizer::{Tokenizer, MASK};

    fn passage(doc: &str, pos: u32, text: &str) -> Passage {
        let tok = Tokenizer::new();
        Passage {
            passage_id: passage_id(doc, pos),
            doc_id: doc.to_string(),
            title: format!("{doc} title"),
            position: pos,
            tokens: tok.tokenize(text),
        }
    }

    fn numbered_passage(n: usize) -> Passage {
        let text: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
        passage("d", 0, &text.join(" "))
    }

    #[test]
    fn window_start_arithmetic() {
        // |q|=40, span at [10,13), window=5: starts must satisfy
        // s <= 10 and s+5 >= 13
        let starts: Vec<usize> = valid_window_starts(10, 3, 5, 40).collect();
        assert_eq!(starts, vec![8, 9, 10]);
    }

    #[test]
    fn window_remove_concatenates_flanks() {
        let q = numbered_passage(40);
        let occ = SpanOccurrence {
            passage_id: q.passage_id.clone(),
            start: 10,
            length: 3,
        };
        // search for a draw that lands on window [8, 13)
        let mut found = false;
        for seed in 0..5000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (query, kept) =
                transform_query(&q, &occ, TransformMode::WindowRemove, &mut rng).unwrap();
            assert!(!kept);
            let surfaces: Vec<&str> = query.iter().map(|t| t.surface.as_str()).collect();
            if surfaces == ["t8", "t9"] {
                found = true;
                break;
            }
        }
        assert!(found, "window [8,13) with span removed should appear");
    }

    #[test]
    fn whole_passage_mask_replaces_one_occurrence() {
        let q = numbered_passage(20);
        let occ = SpanOccurrence {
            passage_id: q.passage_id.clone(),
            start: 7,
            length: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (query, kept) =
            transform_query(&q, &occ, TransformMode::WholePassageMask, &mut rng).unwrap();
        assert!(!kept);
        assert_eq!(query.len(), 18);
        assert_eq!(query.iter().filter(|t| t.surface == MASK).count(), 1);
        assert_eq!(query[7].surface, MASK);
    }

    #[test]
    fn prefix_mode_ends_before_span() {
        let q = numbered_passage(20);
        let occ = SpanOccurrence {
            passage_id: q.passage_id.clone(),
            start: 6,
            length: 2,
        };
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (query, kept) =
                transform_query(&q, &occ, TransformMode::Prefix, &mut rng).unwrap();
            assert!(!kept);
            assert!(!query.is_empty() && query.len() <= 6);
            assert_eq!(query.last().unwrap().surface, "t5");
        }
        // span at position 0 has no prefix
        let occ0 = SpanOccurrence {
            passage_id: q.passage_id.clone(),
            start: 0,
            length: 2,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(transform_query(&q, &occ0, TransformMode::Prefix, &mut rng).is_none());
    }

    #[test]
    fn window_lengths_stay_in_bounds_when_kept() {
        let q = numbered_passage(40);
        let occ = SpanOccurrence {
            passage_id: q.passage_id.clone(),
            start: 12,
            length: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..500 {
            let (query, kept) =
                transform_query(&q, &occ, TransformMode::WindowAlternate, &mut rng).unwrap();
            if kept {
                assert!(query.len() >= WINDOW_MIN && query.len() <= WINDOW_MAX);
                let surfaces: Vec<&str> = query.iter().map(|t| t.surface.as_str()).collect();
                let pos = surfaces.windows(3).position(|w| w == ["t12", "t13", "t14"]);
                assert!(pos.is_some(), "kept window must contain the span");
            } else {
                assert!(query.len() >= WINDOW_MIN.saturating_sub(occ.length));
                assert!(query.iter().all(|t| t.surface != "t13"));
            }
        }
    }

    #[test]
    fn span_kept_fraction_is_balanced() {
        let q = numbered_passage(40);
        let occ = SpanOccurrence {
            passage_id: q.passage_id.clone(),
            start: 12,
            length: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut kept = 0usize;
        let n = 10_000;
        let mut emitted = 0usize;
        while emitted < n {
            if let Some((_, k)) = transform_query(&q, &occ, TransformMode::WindowAlternate, &mut rng)
            {
                emitted += 1;
                if k {
                    kept += 1;
                }
            }
        }
        let fraction = kept as f64 / n as f64;
        assert!((fraction - 0.5).abs() <= 0.02, "fraction {fraction}");
    }

    fn toy_corpus() -> (Corpus, SpanStore) {
        // doc with three passages: two share "silver maple tree", one does not
        let passages = vec![
            passage("d", 0, "the silver maple tree grows fast near water"),
            passage("d", 1, "a silver maple tree sheds seeds in spring"),
            passage("d", 2, "unrelated filler text about nothing at all"),
        ];
        let corpus = Corpus::from_passages(passages).unwrap();
        let (store, _) = mine_corpus(&corpus, 2, 10);
        (corpus, store)
    }

    #[test]
    fn generate_uses_only_valid_triples() {
        let (corpus, store) = toy_corpus();
        let config = GenerateConfig {
            per_doc_cap: 5,
            seed: 3,
            ..GenerateConfig::default()
        };
        let (examples, stats) = generate(&corpus, &store, &config).unwrap();
        assert!(stats.emitted > 0);
        for ex in &examples {
            // positive and query come from the span's passage set, negative from outside
            assert!(ex.positive_id.starts_with("d#"));
            assert_eq!(ex.negative_id.as_deref(), Some("d#2"));
            let positive = corpus.by_id(&ex.positive_id).unwrap();
            let span_surfaces: Vec<&str> = ex.span.iter().map(|s| s.as_str()).collect();
            let pos_surfaces: Vec<&str> =
                positive.tokens.iter().map(|t| t.surface.as_str()).collect();
            assert!(
                pos_surfaces.windows(span_surfaces.len()).any(|w| w == &span_surfaces[..]),
                "positive must contain the span"
            );
            let negative = corpus.by_id(ex.negative_id.as_ref().unwrap()).unwrap();
            let neg_surfaces: Vec<&str> =
                negative.tokens.iter().map(|t| t.surface.as_str()).collect();
            assert!(
                !neg_surfaces.windows(span_surfaces.len()).any(|w| w == &span_surfaces[..]),
                "negative must not contain the span"
            );
        }
    }

    #[test]
    fn generation_replays_identically() {
        let (corpus, store) = toy_corpus();
        let config = GenerateConfig {
            per_doc_cap: 3,
            seed: 11,
            ..GenerateConfig::default()
        };
        let (a, _) = generate(&corpus, &store, &config).unwrap();
        let (b, _) = generate(&corpus, &store, &config).unwrap();
        assert_eq!(a, b);

        let other = GenerateConfig { seed: 12, ..config };
        let (c, _) = generate(&corpus, &store, &other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn all_positive_docs_skip_when_negative_required() {
        // both passages contain the span: no negative pool
        let passages = vec![
            passage("d", 0, "golden eagle soars high above cliffs"),
            passage("d", 1, "one golden eagle lands on rocks"),
        ];
        let corpus = Corpus::from_passages(passages).unwrap();
        let (store, _) = mine_corpus(&corpus, 2, 10);
        assert!(store.span_count() > 0);

        let config = GenerateConfig {
            per_doc_cap: 10,
            seed: 0,
            ..GenerateConfig::default()
        };
        let (examples, stats) = generate(&corpus, &store, &config).unwrap();
        assert!(examples.is_empty());
        assert!(stats.skipped_no_negative > 0);

        // with negatives disabled the same spans generate examples
        let config0 = GenerateConfig {
            negatives_per_query: 0,
            ..config
        };
        let (examples0, _) = generate(&corpus, &store, &config0).unwrap();
        assert!(!examples0.is_empty());
        assert!(examples0.iter().all(|e| e.negative_id.is_none()));
    }

    #[test]
    fn store_corpus_mismatch_is_a_hard_error() {
        let (_, store) = toy_corpus();
        let other = Corpus::from_passages(vec![passage("x", 0, "something else")]).unwrap();
        let err = generate(&other, &store, &GenerateConfig::default()).unwrap_err();
        assert!(matches!(err, Error::StoreCorpusMismatch { .. }));
    }

    #[test]
    fn examples_file_round_trips() {
        let (corpus, store) = toy_corpus();
        let config = GenerateConfig {
            per_doc_cap: 2,
            seed: 5,
            ..GenerateConfig::default()
        };
        let (examples, _) = generate(&corpus, &store, &config).unwrap();
        let mut buf = Vec::new();
        save(&mut buf, &examples, &config, BTreeMap::new()).unwrap();
        let (loaded, header) = load(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(loaded, examples);
        assert_eq!(header.kind, EXAMPLES_KIND);
    }
}
