//! Document ingestion and fixed-size passage chunking.
//!
//! Input is JSON-lines, one object per document with fields `id`, `title`,
//! `text`. Bodies are tokenized and split greedily into consecutive blocks of
//! `passage_size` tokens; the last block may be shorter and is kept. Titles
//! are stored on every passage so encoding and indexing need no document
//! lookup.

use crate::artifact::{self, Header, UpstreamRef};
use crate::error::{Error, Result};
use crate::tokenizer::{Token, Tokenizer};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::ops::Range;
use std::path::Path;

pub const CORPUS_KIND: &str = "corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Passage {
    pub passage_id: String,
    pub doc_id: String,
    pub title: String,
    pub position: u32,
    pub tokens: Vec<Token>,
}

/// `passage_id` is a pure function of document id and position.
pub fn passage_id(doc_id: &str, position: u32) -> String {
    format!("{doc_id}#{position}")
}

#[derive(Debug, Clone, Default)]
pub struct IngestStats {
    pub documents: usize,
    pub skipped_empty: usize,
    pub invalid_utf8_replacements: usize,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    passages: Vec<Passage>,
    doc_index: BTreeMap<String, Range<usize>>,
    by_id: HashMap<String, usize>,
}

impl Corpus {
    /// Build a corpus from passages already in document order. Fails on
    /// duplicate passage ids or non-contiguous documents.
    pub fn from_passages(passages: Vec<Passage>) -> Result<Corpus> {
        let mut doc_index: BTreeMap<String, Range<usize>> = BTreeMap::new();
        let mut by_id = HashMap::with_capacity(passages.len());
        let mut current: Option<(String, usize)> = None;
        for (i, p) in passages.iter().enumerate() {
            if by_id.insert(p.passage_id.clone(), i).is_some() {
                return Err(Error::DuplicateDocId {
                    id: p.passage_id.clone(),
                });
            }
            match &mut current {
                Some((doc, _start)) if *doc == p.doc_id => {}
                _ => {
                    if let Some((doc, start)) = current.take() {
                        doc_index.insert(doc, start..i);
                    }
                    if doc_index.contains_key(&p.doc_id) {
                        return Err(Error::DuplicateDocId {
                            id: p.doc_id.clone(),
                        });
                    }
                    current = Some((p.doc_id.clone(), i));
                }
            }
        }
        if let Some((doc, start)) = current {
            doc_index.insert(doc, start..passages.len());
        }
        Ok(Corpus {
            passages,
            doc_index,
            by_id,
        })
    }

    pub fn len(&self) -> usize {
        self.passages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passages.is_empty()
    }

    pub fn passages(&self) -> &[Passage] {
        &self.passages
    }

    pub fn passage(&self, ordinal: usize) -> &Passage {
        &self.passages[ordinal]
    }

    pub fn ordinal_of(&self, passage_id: &str) -> Option<usize> {
        self.by_id.get(passage_id).copied()
    }

    pub fn by_id(&self, passage_id: &str) -> Option<&Passage> {
        self.ordinal_of(passage_id).map(|i| &self.passages[i])
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &String> {
        self.doc_index.keys()
    }

    pub fn doc_count(&self) -> usize {
        self.doc_index.len()
    }

    /// Passages of one document, in position order.
    pub fn doc_passages(&self, doc_id: &str) -> Option<&[Passage]> {
        self.doc_index
            .get(doc_id)
            .map(|range| &self.passages[range.clone()])
    }

    /// Documents in corpus order (the order passages were ingested).
    pub fn docs_in_order(&self) -> Vec<(&str, &[Passage])> {
        let mut seen = Vec::new();
        let mut last: Option<&str> = None;
        for p in &self.passages {
            if last != Some(p.doc_id.as_str()) {
                seen.push(p.doc_id.as_str());
                last = Some(p.doc_id.as_str());
            }
        }
        seen.into_iter()
            .map(|doc| (doc, self.doc_passages(doc).unwrap()))
            .collect()
    }
}

/// Title tokens, a reserved separator, then the passage tokens. This is the
/// text form used for passage encoding and BM25 indexing; queries are never
/// given a title.
pub fn passage_text_with_title(p: &Passage, tokenizer: &Tokenizer) -> Vec<Token> {
    let mut out = tokenizer.tokenize(&p.title);
    out.push(Token::sep());
    out.extend(p.tokens.iter().cloned());
    out
}

/// Token frequencies over the encoder-visible stream: per passage, title
/// tokens plus body tokens. Feed this to `Vocabulary::from_counts`.
pub fn token_counts(corpus: &Corpus, tokenizer: &Tokenizer) -> BTreeMap<String, u64> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for p in corpus.passages() {
        for t in tokenizer.tokenize(&p.title) {
            *counts.entry(t.surface).or_insert(0) += 1;
        }
        for t in &p.tokens {
            *counts.entry(t.surface.clone()).or_insert(0) += 1;
        }
    }
    counts
}

#[derive(Deserialize)]
struct RawDocument {
    id: String,
    title: String,
    text: String,
}

/// Tokenize and chunk one document body into passages.
pub fn chunk_document(
    doc_id: &str,
    title: &str,
    body_tokens: Vec<Token>,
    passage_size: usize,
) -> Vec<Passage> {
    assert!(passage_size >= 1, "passage_size must be positive");
    let mut passages = Vec::new();
    let mut tokens = body_tokens;
    let mut position = 0u32;
    while !tokens.is_empty() {
        let take = tokens.len().min(passage_size);
        let rest = tokens.split_off(take);
        passages.push(Passage {
            passage_id: passage_id(doc_id, position),
            doc_id: doc_id.to_string(),
            title: title.to_string(),
            position,
            tokens,
        });
        tokens = rest;
        position += 1;
    }
    passages
}

/// Ingest a JSON-lines document stream into a passage corpus.
///
/// An optional first-line artifact header (an object with a `magic` field)
/// is skipped, so pipeline-produced document files carry provenance without
/// breaking hand-written inputs.
pub fn ingest<R: BufRead>(
    reader: R,
    passage_size: usize,
    tokenizer: &Tokenizer,
) -> Result<(Corpus, IngestStats)> {
    if passage_size == 0 {
        return Err(Error::InvalidConfig {
            msg: "passage_size must be >= 1".to_string(),
        });
    }
    let mut stats = IngestStats::default();
    let mut passages = Vec::new();
    let mut seen_docs: HashMap<String, ()> = HashMap::new();
    for (line_no, line) in reader.split(b'\n').enumerate() {
        let line_no = line_no + 1;
        let bytes = line.map_err(|e| Error::io("<documents>", e))?;
        let (text, replaced) = lossy_line(&bytes);
        stats.invalid_utf8_replacements += replaced;
        let trimmed = text.trim();
        if trimmed.is_empty() {
            continue;
        }
        if line_no == 1 {
            if let Ok(value) = serde_json::from_str::<serde_json::Value>(trimmed) {
                if value.get("magic").is_some() {
                    continue; // provenance header from an upstream stage
                }
            }
        }
        let raw: RawDocument =
            serde_json::from_str(trimmed).map_err(|e| Error::MalformedRecord {
                line: line_no,
                msg: e.to_string(),
            })?;
        if seen_docs.insert(raw.id.clone(), ()).is_some() {
            return Err(Error::DuplicateDocId { id: raw.id });
        }
        let body_tokens = tokenizer.tokenize(&raw.text);
        if body_tokens.is_empty() {
            stats.skipped_empty += 1;
            continue;
        }
        stats.documents += 1;
        passages.extend(chunk_document(&raw.id, &raw.title, body_tokens, passage_size));
    }
    Ok((Corpus::from_passages(passages)?, stats))
}

fn lossy_line(bytes: &[u8]) -> (String, usize) {
    let text = String::from_utf8_lossy(bytes);
    let replaced = text.matches('\u{FFFD}').count();
    (text.into_owned(), replaced)
}

#[derive(Serialize, Deserialize)]
struct PassageRecord {
    passage_id: String,
    doc_id: String,
    position: u32,
    title: String,
    tokens: Vec<String>,
}

/// Persist the corpus as a JSON-lines artifact with a provenance header.
pub fn save<W: Write, C: Serialize>(
    w: &mut W,
    corpus: &Corpus,
    config: &C,
    upstream: BTreeMap<String, UpstreamRef>,
) -> Result<()> {
    let header = Header::new(CORPUS_KIND, CORPUS_VERSION, config, upstream);
    artifact::write_jsonl_header(w, &header)?;
    for p in &corpus.passages {
        let record = PassageRecord {
            passage_id: p.passage_id.clone(),
            doc_id: p.doc_id.clone(),
            position: p.position,
            title: p.title.clone(),
            tokens: p.tokens.iter().map(|t| t.surface.clone()).collect(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        writeln!(w, "{line}").map_err(|e| Error::io("<corpus>", e))?;
    }
    Ok(())
}

/// Load a corpus artifact. Stop-word flags are recomputed with the given
/// tokenizer so a run-level stop-word override applies uniformly.
pub fn load<R: BufRead>(mut r: R, tokenizer: &Tokenizer) -> Result<(Corpus, Header)> {
    let header = artifact::read_jsonl_header(&mut r, CORPUS_KIND, CORPUS_VERSION)?;
    let mut passages = Vec::new();
    for (line_no, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::io("<corpus>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: PassageRecord =
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line: line_no + 2,
                msg: e.to_string(),
            })?;
        passages.push(Passage {
            passage_id: record.passage_id,
            doc_id: record.doc_id,
            position: record.position,
            title: record.title,
            tokens: record
                .tokens
                .into_iter()
                .map(|s| tokenizer.classify(s))
                .collect(),
        });
    }
    Ok((Corpus::from_passages(passages)?, header))
}

pub fn load_path(path: &Path, tokenizer: &Tokenizer) -> Result<(Corpus, Header)> {
    let reader = artifact::open_reader(path)?;
    load(reader, tokenizer)
}
