//! From-scratch BM25 inverted index over title-prefixed passages.
//!
//! Scoring follows the Robertson convention with a distinct-term query
//! (repeated query terms count once):
//! `sum_t IDF(t) * tf / (tf + k1 * (1 - b + b * dl / avgdl))` with
//! `IDF(t) = ln(1 + (N - df + 0.5) / (df + 0.5))`, which is strictly
//! positive, so every passage sharing a term with the query scores > 0.
//! Stop words are indexed; IDF handles them.

use crate::artifact::{self, Header, UpstreamRef};
use crate::corpus::{passage_text_with_title, Corpus};
use crate::error::Result;
use crate::tokenizer::{Token, Tokenizer};
use serde::Serialize;
use std::collections::{BTreeMap, HashMap};
use std::io::Read;
use std::path::Path;

pub const SPARSE_KIND: &str = "sparse_index";
pub const SPARSE_VERSION: u32 = 1;

pub const DEFAULT_K1: f64 = 0.9;
pub const DEFAULT_B: f64 = 0.4;

/// (passage id, score): the common currency of every retriever.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredHit {
    pub passage_id: String,
    pub score: f64,
}

/// Sort hits by descending score, ties by ascending passage id, and truncate
/// to k. The shared ranking rule of all retrievers.
pub fn rank_hits(mut hits: Vec<ScoredHit>, k: usize) -> Vec<ScoredHit> {
    hits.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then_with(|| a.passage_id.cmp(&b.passage_id))
    });
    hits.truncate(k);
    hits
}

#[derive(Debug, Clone, PartialEq)]
pub struct InvertedIndex {
    /// Term surface -> term id, assigned in first-encounter order.
    terms: HashMap<String, u32>,
    /// Per term id: postings sorted by passage ordinal.
    postings: Vec<Vec<(u32, u32)>>,
    doc_lengths: Vec<u32>,
    avg_doc_length: f64,
    passage_ids: Vec<String>,
    pub k1: f64,
    pub b: f64,
}

impl InvertedIndex {
    /// Index `passage_text_with_title` for every passage of the corpus.
    pub fn build(corpus: &Corpus, tokenizer: &Tokenizer, k1: f64, b: f64) -> InvertedIndex {
        let mut terms: HashMap<String, u32> = HashMap::new();
        let mut postings: Vec<Vec<(u32, u32)>> = Vec::new();
        let mut doc_lengths = Vec::with_capacity(corpus.len());
        let mut passage_ids = Vec::with_capacity(corpus.len());

        for (ordinal, passage) in corpus.passages().iter().enumerate() {
            let tokens = passage_text_with_title(passage, tokenizer);
            doc_lengths.push(tokens.len() as u32);
            passage_ids.push(passage.passage_id.clone());
            let mut counts: BTreeMap<&str, u32> = BTreeMap::new();
            for t in &tokens {
                *counts.entry(t.surface.as_str()).or_insert(0) += 1;
            }
            // first-encounter term ids come from token order, not count order
            for t in &tokens {
                if !terms.contains_key(t.surface.as_str()) {
                    terms.insert(t.surface.clone(), postings.len() as u32);
                    postings.push(Vec::new());
                }
            }
            for (surface, tf) in counts {
                let tid = terms[surface] as usize;
                postings[tid].push((ordinal as u32, tf));
            }
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            total as f64 / doc_lengths.len() as f64
        };
        InvertedIndex {
            terms,
            postings,
            doc_lengths,
            avg_doc_length,
            passage_ids,
            k1,
            b,
        }
    }

    pub fn passage_count(&self) -> usize {
        self.doc_lengths.len()
    }

    pub fn avg_doc_length(&self) -> f64 {
        self.avg_doc_length
    }

    pub fn doc_length(&self, ordinal: usize) -> u32 {
        self.doc_lengths[ordinal]
    }

    pub fn passage_id(&self, ordinal: usize) -> &str {
        &self.passage_ids[ordinal]
    }

    pub fn postings(&self, surface: &str) -> &[(u32, u32)] {
        self.terms
            .get(surface)
            .map(|&tid| self.postings[tid as usize].as_slice())
            .unwrap_or(&[])
    }

    fn idf(&self, df: usize) -> f64 {
        let n = self.passage_count() as f64;
        (1.0 + (n - df as f64 + 0.5) / (df as f64 + 0.5)).ln()
    }

    fn term_weight(&self, tf: u32, dl: u32) -> f64 {
        let tf = tf as f64;
        let norm = self.k1 * (1.0 - self.b + self.b * dl as f64 / self.avg_doc_length);
        tf / (tf + norm)
    }

    /// Deduplicate query tokens preserving first-appearance order: the
    /// distinct-term convention, shared with the scoring oracle.
    pub fn distinct_terms<'q>(query: &'q [Token]) -> Vec<&'q str> {
        let mut seen = Vec::new();
        for t in query {
            if !seen.contains(&t.surface.as_str()) {
                seen.push(t.surface.as_str());
            }
        }
        seen
    }

    /// BM25 score of one passage for the query.
    pub fn bm25_score(&self, query: &[Token], ordinal: usize) -> f64 {
        assert!(ordinal < self.passage_count(), "passage ordinal out of range");
        let mut score = 0.0;
        for surface in Self::distinct_terms(query) {
            let postings = self.postings(surface);
            if postings.is_empty() {
                continue;
            }
            let idf = self.idf(postings.len());
            if let Ok(pos) = postings.binary_search_by_key(&(ordinal as u32), |&(o, _)| o) {
                let (_, tf) = postings[pos];
                score += idf * self.term_weight(tf, self.doc_lengths[ordinal]);
            }
        }
        score
    }

    /// Exact top-k by BM25 score. Passages with score zero (no shared term)
    /// are excluded; ties break by ascending passage id.
    pub fn search(&self, query: &[Token], k: usize) -> Vec<ScoredHit> {
        if k == 0 || query.is_empty() {
            return Vec::new();
        }
        let mut scores: HashMap<u32, f64> = HashMap::new();
        for surface in Self::distinct_terms(query) {
            let postings = self.postings(surface);
            if postings.is_empty() {
                continue;
            }
            let idf = self.idf(postings.len());
            for &(ordinal, tf) in postings {
                let w = idf * self.term_weight(tf, self.doc_lengths[ordinal as usize]);
                *scores.entry(ordinal).or_insert(0.0) += w;
            }
        }
        let hits: Vec<ScoredHit> = scores
            .into_iter()
            .filter(|&(_, s)| s > 0.0)
            .map(|(ordinal, score)| ScoredHit {
                passage_id: self.passage_ids[ordinal as usize].clone(),
                score,
            })
            .collect();
        rank_hits(hits, k)
    }

    /// Versioned binary persistence with a provenance header.
    pub fn save<C: Serialize>(
        &self,
        path: &Path,
        config: &C,
        upstream: BTreeMap<String, UpstreamRef>,
    ) -> Result<()> {
        let header = Header::new(SPARSE_KIND, SPARSE_VERSION, config, upstream);
        let writer = artifact::create_writer(path)?;
        let mut w = artifact::BinWriter::new(writer, &header)?;
        w.write_f64(self.k1)?;
        w.write_f64(self.b)?;
        w.write_u64(self.passage_ids.len() as u64)?;
        for (pid, dl) in self.passage_ids.iter().zip(&self.doc_lengths) {
            w.write_str(pid)?;
            w.write_u32(*dl)?;
        }
        // terms in id order
        let mut by_id: Vec<(&String, u32)> = self.terms.iter().map(|(s, &i)| (s, i)).collect();
        by_id.sort_by_key(|&(_, id)| id);
        w.write_u64(by_id.len() as u64)?;
        for (surface, tid) in by_id {
            w.write_str(surface)?;
            let postings = &self.postings[tid as usize];
            w.write_u64(postings.len() as u64)?;
            for &(ordinal, tf) in postings {
                w.write_u32(ordinal)?;
                w.write_u32(tf)?;
            }
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<(InvertedIndex, Header)> {
        let reader = artifact::open_reader(path)?;
        Self::load_from(reader)
    }

    pub fn load_from<R: Read>(reader: R) -> Result<(InvertedIndex, Header)> {
        let mut r = artifact::BinReader::new(reader, SPARSE_KIND, SPARSE_VERSION)?;
        let k1 = r.read_f64()?;
        let b = r.read_f64()?;
        let n = r.read_u64()? as usize;
        let mut passage_ids = Vec::with_capacity(n);
        let mut doc_lengths = Vec::with_capacity(n);
        for _ in 0..n {
            passage_ids.push(r.read_str()?);
            doc_lengths.push(r.read_u32()?);
        }
        let term_count = r.read_u64()? as usize;
        let mut terms = HashMap::with_capacity(term_count);
        let mut postings = Vec::with_capacity(term_count);
        for tid in 0..term_count {
            let surface = r.read_str()?;
            terms.insert(surface, tid as u32);
            let len = r.read_u64()? as usize;
            let mut plist = Vec::with_capacity(len);
            for _ in 0..len {
                let ordinal = r.read_u32()?;
                let tf = r.read_u32()?;
                plist.push((ordinal, tf));
            }
            postings.push(plist);
        }
        let total: u64 = doc_lengths.iter().map(|&l| l as u64).sum();
        let avg_doc_length = if doc_lengths.is_empty() {
            0.0
        } else {
            total as f64 / doc_lengths.len() as f64
        };
        let header = r.header.clone();
        Ok((
            InvertedIndex {
                terms,
                postings,
                doc_lengths,
                avg_doc_length,
                passage_ids,
                k1,
                b,
            },
            header,
        ))
    }
}
