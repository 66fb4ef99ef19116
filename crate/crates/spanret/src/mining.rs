//! Cross-passage recurring span mining.
//!
//! A recurring span is a token n-gram that appears more than once and in more
//! than one passage of the same document. Candidates pass five filters:
//! whole words only (vacuous under the word tokenizer), maximality, at least
//! one non-stop-word token, at most `max_len` tokens, at least `min_len`
//! tokens.
//!
//! Maximality is per n-gram content: a span is non-maximal iff extending it
//! by one token on the left or right — the same token at every occurrence —
//! yields another in-bounds cross-passage recurring n-gram. Since such an
//! extension inherits the full occurrence set, this reduces to: every
//! occurrence has the same neighbor on that side and the extended length is
//! still within `max_len`.

use crate::artifact::{self, Header, UpstreamRef};
use crate::corpus::{Corpus, Passage};
use crate::error::{Error, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::path::Path;

pub const SPANS_KIND: &str = "spans";
pub const SPANS_VERSION: u32 = 1;

pub const DEFAULT_MIN_SPAN_LEN: usize = 2;
pub const DEFAULT_MAX_SPAN_LEN: usize = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpanOccurrence {
    pub passage_id: String,
    pub start: usize,
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurringSpan {
    pub doc_id: String,
    pub tokens: Vec<String>,
    pub occurrences: Vec<SpanOccurrence>,
    /// Distinct passage ids covered by the occurrences, sorted.
    pub passage_set: Vec<String>,
}

/// Rejection tallies per filter, over distinct n-gram contents.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MineStats {
    pub candidates: u64,
    pub rejected_single_passage: u64,
    pub rejected_all_stopwords: u64,
    pub rejected_not_maximal: u64,
    pub emitted: u64,
}

impl MineStats {
    fn merge(&mut self, other: &MineStats) {
        self.candidates += other.candidates;
        self.rejected_single_passage += other.rejected_single_passage;
        self.rejected_all_stopwords += other.rejected_all_stopwords;
        self.rejected_not_maximal += other.rejected_not_maximal;
        self.emitted += other.emitted;
    }
}

// Interned view of a document: passages mapped to small symbol ids so n-gram
// grouping compares u32 slices instead of strings.
struct DocView<'a> {
    passages: &'a [Passage],
    symbols: Vec<Vec<u32>>,
    surfaces: Vec<String>, // per symbol id
    stop_flags: Vec<bool>, // per symbol id
}

impl<'a> DocView<'a> {
    fn new(passages: &'a [Passage]) -> DocView<'a> {
        let mut intern: HashMap<&str, u32> = HashMap::new();
        let mut surfaces = Vec::new();
        let mut stop_flags = Vec::new();
        let symbols = passages
            .iter()
            .map(|p| {
                p.tokens
                    .iter()
                    .map(|t| {
                        *intern.entry(t.surface.as_str()).or_insert_with(|| {
                            surfaces.push(t.surface.clone());
                            stop_flags.push(t.is_stopword);
                            (stop_flags.len() - 1) as u32
                        })
                    })
                    .collect()
            })
            .collect();
        DocView {
            passages,
            symbols,
            surfaces,
            stop_flags,
        }
    }

    fn gram(&self, occ: (usize, usize), n: usize) -> &[u32] {
        &self.symbols[occ.0][occ.1..occ.1 + n]
    }

    fn left_of(&self, occ: (usize, usize)) -> Option<u32> {
        occ.1.checked_sub(1).map(|i| self.symbols[occ.0][i])
    }

    fn right_of(&self, occ: (usize, usize), n: usize) -> Option<u32> {
        self.symbols[occ.0].get(occ.1 + n).copied()
    }
}

const HASH_BASE: u64 = 0x9E37_79B9_7F4A_7C15;

/// Mine the recurring spans of one document's passages.
///
/// Occurrence positions are grouped per n-gram content with rolling-hash
/// keys; hash collisions are resolved by exact symbol comparison.
pub fn mine_document(
    passages: &[Passage],
    min_len: usize,
    max_len: usize,
) -> (Vec<RecurringSpan>, MineStats) {
    assert!(min_len >= 1 && max_len >= min_len, "invalid span bounds");
    let mut stats = MineStats::default();
    if passages.is_empty() {
        return (Vec::new(), stats);
    }
    debug_assert!(
        passages.iter().all(|p| p.doc_id == passages[0].doc_id),
        "mine_document expects passages of a single document"
    );
    let view = DocView::new(passages);

    // Group all in-bounds n-gram occurrences by content. Buckets are keyed
    // by (n, rolling hash); each bucket holds groups of exactly-equal grams.
    type Occ = (usize, usize); // (passage index, start)
    let mut buckets: HashMap<(usize, u64), Vec<(Occ, Vec<Occ>)>> = HashMap::new();
    for (pi, syms) in view.symbols.iter().enumerate() {
        for n in min_len..=max_len.min(syms.len()) {
            let mut hash = 0u64;
            let mut pow = 1u64;
            for _ in 1..n {
                pow = pow.wrapping_mul(HASH_BASE);
            }
            for (start, window) in syms.windows(n).enumerate() {
                if start == 0 {
                    hash = window
                        .iter()
                        .fold(0u64, |h, &s| h.wrapping_mul(HASH_BASE).wrapping_add(s as u64 + 1));
                } else {
                    let out = syms[start - 1] as u64 + 1;
                    let inc = syms[start + n - 1] as u64 + 1;
                    hash = hash
                        .wrapping_sub(out.wrapping_mul(pow))
                        .wrapping_mul(HASH_BASE)
                        .wrapping_add(inc);
                }
                let occ = (pi, start);
                let groups = buckets.entry((n, hash)).or_default();
                match groups
                    .iter_mut()
                    .find(|(rep, _)| view.gram(*rep, n) == view.gram(occ, n))
                {
                    Some((_, occs)) => occs.push(occ),
                    None => groups.push((occ, vec![occ])),
                }
            }
        }
    }

    let mut spans = Vec::new();
    for ((n, _), groups) in &buckets {
        for (rep, occs) in groups {
            stats.candidates += 1;
            let distinct = distinct_passages(occs);
            if distinct < 2 {
                stats.rejected_single_passage += 1;
                continue;
            }
            let gram = view.gram(*rep, *n);
            if gram.iter().all(|&s| view.stop_flags[s as usize]) {
                stats.rejected_all_stopwords += 1;
                continue;
            }
            if !is_maximal(&view, occs, *n, max_len) {
                stats.rejected_not_maximal += 1;
                continue;
            }
            stats.emitted += 1;
            let mut occs = occs.clone();
            occs.sort_unstable();
            let mut passage_set: Vec<String> = occs
                .iter()
                .map(|&(pi, _)| view.passages[pi].passage_id.clone())
                .collect();
            passage_set.sort();
            passage_set.dedup();
            spans.push(RecurringSpan {
                doc_id: passages[0].doc_id.clone(),
                tokens: gram
                    .iter()
                    .map(|&s| view.surfaces[s as usize].clone())
                    .collect(),
                occurrences: occs
                    .iter()
                    .map(|&(pi, start)| SpanOccurrence {
                        passage_id: view.passages[pi].passage_id.clone(),
                        start,
                        length: *n,
                    })
                    .collect(),
                passage_set,
            });
        }
    }
    spans.sort_by(|a, b| {
        let ka = (&a.occurrences[0].passage_id, a.occurrences[0].start, &a.tokens);
        let kb = (&b.occurrences[0].passage_id, b.occurrences[0].start, &b.tokens);
        ka.cmp(&kb)
    });
    (spans, stats)
}

fn distinct_passages(occs: &[(usize, usize)]) -> usize {
    let mut pids: Vec<usize> = occs.iter().map(|&(pi, _)| pi).collect();
    pids.sort_unstable();
    pids.dedup();
    pids.len()
}

fn is_maximal(view: &DocView, occs: &[(usize, usize)], n: usize, max_len: usize) -> bool {
    if n + 1 > max_len {
        return true;
    }
    let same_left = occs
        .iter()
        .map(|&occ| view.left_of(occ))
        .collect::<Option<Vec<u32>>>()
        .is_some_and(|lefts| lefts.windows(2).all(|w| w[0] == w[1]));
    if same_left {
        return false;
    }
    let same_right = occs
        .iter()
        .map(|&occ| view.right_of(occ, n))
        .collect::<Option<Vec<u32>>>()
        .is_some_and(|rights| rights.windows(2).all(|w| w[0] == w[1]));
    !same_right
}

/// Per-document span lists, keyed and ordered by doc id.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SpanStore {
    by_doc: BTreeMap<String, Vec<RecurringSpan>>,
}

impl SpanStore {
    pub fn doc_spans(&self, doc_id: &str) -> &[RecurringSpan] {
        self.by_doc.get(doc_id).map_or(&[], |v| v.as_slice())
    }

    pub fn docs(&self) -> impl Iterator<Item = (&String, &Vec<RecurringSpan>)> {
        self.by_doc.iter()
    }

    pub fn span_count(&self) -> usize {
        self.by_doc.values().map(|v| v.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = &RecurringSpan> {
        self.by_doc.values().flatten()
    }

    /// Every doc id in the store must resolve in the corpus.
    pub fn check_against(&self, corpus: &Corpus) -> Result<()> {
        for doc_id in self.by_doc.keys() {
            if corpus.doc_passages(doc_id).is_none() {
                return Err(Error::StoreCorpusMismatch {
                    doc_id: doc_id.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Mine every document of the corpus. Documents are independent work items;
/// the merge into the store is deterministic (keyed by doc id).
pub fn mine_corpus(corpus: &Corpus, min_len: usize, max_len: usize) -> (SpanStore, MineStats) {
    let docs = corpus.docs_in_order();
    let mined: Vec<(String, Vec<RecurringSpan>, MineStats)> = docs
        .par_iter()
        .map(|(doc_id, passages)| {
            let (spans, stats) = mine_document(passages, min_len, max_len);
            (doc_id.to_string(), spans, stats)
        })
        .collect();
    let mut store = SpanStore::default();
    let mut total = MineStats::default();
    for (doc_id, spans, stats) in mined {
        total.merge(&stats);
        if !spans.is_empty() {
            store.by_doc.insert(doc_id, spans);
        }
    }
    (store, total)
}

/// Persist the store as JSON-lines, one span per line, with a provenance
/// header carrying the mining stats.
pub fn save<W: Write, C: Serialize>(
    w: &mut W,
    store: &SpanStore,
    stats: &MineStats,
    config: &C,
    upstream: BTreeMap<String, UpstreamRef>,
) -> Result<()> {
    let mut header = Header::new(SPANS_KIND, SPANS_VERSION, config, upstream);
    header.config = serde_json::json!({
        "config": header.config,
        "stats": stats,
    });
    artifact::write_jsonl_header(w, &header)?;
    for span in store.iter() {
        let line = serde_json::to_string(span).expect("span serializes");
        writeln!(w, "{line}").map_err(|e| Error::io("<spans>", e))?;
    }
    Ok(())
}

pub fn load<R: BufRead>(mut r: R) -> Result<(SpanStore, Header)> {
    let header = artifact::read_jsonl_header(&mut r, SPANS_KIND, SPANS_VERSION)?;
    let mut store = SpanStore::default();
    for (line_no, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<spans>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let span: RecurringSpan =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line: line_no + 2,
                msg: e.to_string(),
            })?;
        store.by_doc.entry(span.doc_id.clone()).or_default().push(span);
    }
    Ok((store, header))
}

pub fn load_path(path: &Path) -> Result<(SpanStore, Header)> {
    load(artifact::open_reader(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{chunk_document, passage_id};
    use crate::tokenizer::Tokenizer;

    fn passage_with_doc(doc: &str, pos: u32, text: &str) -> Passage {
        let tok = Tokenizer::new();
        Passage {
            passage_id: passage_id(doc, pos),
            doc_id: doc.to_string(),
            title: String::new(),
            position: pos,
            tokens: tok.tokenize(text),
        }
    }

    fn doc(texts: &[&str]) -> Vec<Passage> {
        texts
            .iter()
            .enumerate()
            .map(|(i, t)| passage_with_doc("d", i as u32, t))
            .collect()
    }

    #[test]
    fn finds_the_single_maximal_span() {
        let passages = doc(&[
            "the quick brown fox jumps",
            "a quick brown fox runs",
            "nothing here",
        ]);
        let (spans, _) = mine_document(&passages, 2, 10);
        assert_eq!(spans.len(), 1);
        assert_eq!(spans[0].tokens, vec!["quick", "brown", "fox"]);
        assert_eq!(spans[0].passage_set, vec!["d#0", "d#1"]);
        assert_eq!(spans[0].occurrences.len(), 2);
    }

    #[test]
    fn single_passage_document_yields_nothing() {
        let passages = doc(&["repeat me repeat me repeat me"]);
        let (spans, _) = mine_document(&passages, 2, 10);
        assert!(spans.is_empty());
    }

    #[test]
    fn all_stopword_spans_are_filtered() {
        let passages = doc(&["of the and", "of the and"]);
        let (spans, stats) = mine_document(&passages, 2, 10);
        assert!(spans.is_empty());
        assert!(stats.rejected_all_stopwords > 0);
    }

    #[test]
    fn empty_passage_list_is_empty_result() {
        let (spans, _) = mine_document(&[], 2, 10);
        assert!(spans.is_empty());
    }

    #[test]
    fn same_passage_repeats_do_not_qualify_alone() {
        // span repeats twice but only within one passage of the pair
        let passages = doc(&["red panda sleeps red panda wakes", "no overlap text"]);
        let (spans, _) = mine_document(&passages, 2, 10);
        assert!(spans.is_empty());
    }

    #[test]
    fn extension_beyond_max_len_does_not_disqualify() {
        // two identical 6-token passages, max_len=3: all 2-grams extend
        // uniformly within bounds (non-maximal), while every 3-gram would
        // only extend to length 4 > max_len and is therefore maximal.
        let text = "alpha beta gamma delta epsilon zeta";
        let passages = doc(&[text, text]);
        let (spans, _) = mine_document(&passages, 2, 3);
        let token_sets: Vec<&Vec<String>> = spans.iter().map(|s| &s.tokens).collect();
        assert!(token_sets.iter().all(|t| t.len() == 3));
        assert_eq!(spans.len(), 4); // one maximal 3-gram per start offset
    }

    #[test]
    fn mine_corpus_is_deterministic_and_merges_per_doc() {
        let tok = Tokenizer::new();
        let mut passages = Vec::new();
        for d in 0..5 {
            let doc_id = format!("doc{d}");
            let body = format!(
                "shared entity{d} marker one filler . shared entity{d} marker two other words",
            );
            let toks = tok.tokenize(&body);
            passages.extend(chunk_document(&doc_id, "t", toks, 6));
        }
        let corpus = corpus_from(passages);
        let (s1, st1) = mine_corpus(&corpus, 2, 10);
        let (s2, st2) = mine_corpus(&corpus, 2, 10);
        assert_eq!(s1, s2);
        assert_eq!(st1, st2);
        assert_eq!(st1.emitted as usize, s1.span_count());

        // merged store equals per-document mining
        for (doc_id, spans) in s1.docs() {
            let (expected, _) =
                mine_document(corpus.doc_passages(doc_id).unwrap(), 2, 10);
            assert_eq!(spans, &expected);
        }
    }

    #[test]
    fn corpus_of_single_passage_docs_is_empty_store() {
        let tok = Tokenizer::new();
        let mut passages = Vec::new();
        for d in 0..4 {
            let doc_id = format!("doc{d}");
            passages.extend(chunk_document(
                &doc_id,
                "t",
                tok.tokenize("only one passage lives here"),
                100,
            ));
        }
        let corpus = corpus_from(passages);
        let (store, _) = mine_corpus(&corpus, 2, 10);
        assert_eq!(store.span_count(), 0);
    }

    #[test]
    fn store_round_trips_and_checks_corpus() {
        let passages = doc(&["green turtle swims today", "green turtle rests now"]);
        let corpus = corpus_from(passages.clone());
        let (store, stats) = mine_corpus(&corpus, 2, 10);
        assert_eq!(store.span_count(), 1);

        let mut buf = Vec::new();
        save(&mut buf, &store, &stats, &serde_json::json!({"min": 2}), BTreeMap::new()).unwrap();
        let (loaded, _) = load(std::io::Cursor::new(&buf)).unwrap();
        assert_eq!(loaded, store);

        loaded.check_against(&corpus).unwrap();
        let other = corpus_from(vec![passage_with_doc("other", 0, "different doc entirely")]);
        assert!(matches!(
            loaded.check_against(&other),
            Err(Error::StoreCorpusMismatch { .. })
        ));
    }

    fn corpus_from(passages: Vec<Passage>) -> Corpus {
        Corpus::from_passages(passages).unwrap()
    }
}
