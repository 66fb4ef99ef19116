//! Top-k retrieval accuracy over QA sets, plus pseudo-query evaluation for
//! unsupervised validation.
//!
//! A question counts as answered at rank r when the first retrieved passage
//! whose title+body tokens contain an answer token sequence (contiguous,
//! after shared normalization) sits at rank r.

use crate::corpus::{passage_text_with_title, Corpus};
use crate::dense::DenseIndex;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::examples::PseudoExample;
use crate::hybrid::{fuse, HybridConfig};
use crate::sparse::{InvertedIndex, ScoredHit};
use crate::tokenizer::{Token, Tokenizer, Vocabulary};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{BufRead, Write};
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QAExample {
    pub question: String,
    pub answers: Vec<String>,
}

/// Load a QA set: JSON-lines with `question` and `answers`. A leading
/// artifact header line is tolerated and skipped.
pub fn load_qa<R: BufRead>(reader: R, tokenizer: &Tokenizer) -> Result<Vec<QAExample>> {
    let mut out = Vec::new();
    for (line_no, line) in reader.lines().enumerate() {
        let line_no = line_no + 1;
        let line = line.map_err(|e| Error::io("<qa>", e))?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if line_no == 1 {
            if let Ok(value) = serde_json::from_str::<serde_json::Value>(trimmed) {
                if value.get("magic").is_some() {
                    continue;
                }
            }
        }
        let ex: QAExample = serde_json::from_str(trimmed).map_err(|e| Error::MalformedRecord {
            line: line_no,
            msg: e.to_string(),
        })?;
        if ex.answers.is_empty()
            || ex.answers.iter().all(|a| tokenizer.tokenize(a).is_empty())
        {
            return Err(Error::MalformedRecord {
                line: line_no,
                msg: "question needs at least one answer that survives normalization".to_string(),
            });
        }
        out.push(ex);
    }
    Ok(out)
}

pub fn load_qa_path(path: &Path, tokenizer: &Tokenizer) -> Result<Vec<QAExample>> {
    load_qa(crate::artifact::open_reader(path)?, tokenizer)
}

/// True iff any answer occurs as a contiguous token subsequence of the
/// passage's title+body tokens.
pub fn has_answer(passage_tokens: &[Token], answers: &[Vec<Token>]) -> bool {
    answers.iter().any(|answer| {
        !answer.is_empty()
            && passage_tokens
                .windows(answer.len())
                .any(|w| w.iter().zip(answer).all(|(a, b)| a.surface == b.surface))
    })
}

/// Anything that turns a question into a ranked hit list.
pub trait Retriever: Sync {
    fn retrieve(&self, question: &str, k: usize) -> Result<Vec<ScoredHit>>;
    /// Identity and config snapshot recorded in reports.
    fn identity(&self) -> serde_json::Value;
}

pub struct SparseRetriever<'a> {
    pub index: &'a InvertedIndex,
    pub tokenizer: &'a Tokenizer,
}

impl Retriever for SparseRetriever<'_> {
    fn retrieve(&self, question: &str, k: usize) -> Result<Vec<ScoredHit>> {
        Ok(self.index.search(&self.tokenizer.tokenize(question), k))
    }

    fn identity(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": "sparse",
            "k1": self.index.k1,
            "b": self.index.b,
            "passages": self.index.passage_count(),
        })
    }
}

pub struct DenseRetriever<'a> {
    pub model: &'a EncoderModel,
    pub vocab: &'a Vocabulary,
    pub index: &'a DenseIndex,
    pub model_fingerprint: String,
    pub tokenizer: &'a Tokenizer,
}

impl Retriever for DenseRetriever<'_> {
    fn retrieve(&self, question: &str, k: usize) -> Result<Vec<ScoredHit>> {
        self.index.search(
            self.model,
            self.vocab,
            &self.model_fingerprint,
            &self.tokenizer.tokenize(question),
            k,
        )
    }

    fn identity(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": "dense",
            "model_fingerprint": self.model_fingerprint,
            "embed_dim": self.model.config.embed_dim,
            "passages": self.index.len(),
        })
    }
}

pub struct HybridRetriever<'a> {
    pub dense: DenseRetriever<'a>,
    pub sparse: SparseRetriever<'a>,
    pub config: HybridConfig,
}

impl Retriever for HybridRetriever<'_> {
    fn retrieve(&self, question: &str, k: usize) -> Result<Vec<ScoredHit>> {
        let config = HybridConfig {
            k: k.min(self.config.k_prime),
            ..self.config
        };
        let dense_hits = self.dense.retrieve(question, self.config.k_prime)?;
        let sparse_hits = self.sparse.retrieve(question, self.config.k_prime)?;
        fuse(&dense_hits, &sparse_hits, &config)
    }

    fn identity(&self) -> serde_json::Value {
        serde_json::json!({
            "mode": "hybrid",
            "alpha": self.config.alpha,
            "k_prime": self.config.k_prime,
            "dense": self.dense.identity(),
            "sparse": self.sparse.identity(),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    /// accuracy[i] = fraction of questions answered within ks[i] hits.
    pub accuracy: Vec<f64>,
    /// Rank of the first answering passage per question; None = not found.
    pub hit_ranks: Vec<Option<usize>>,
    pub excluded: usize,
    pub retriever: serde_json::Value,
}

impl EvalReport {
    pub fn accuracy_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|i| self.accuracy[i])
    }

    fn from_ranks(
        ks: &[usize],
        hit_ranks: Vec<Option<usize>>,
        excluded: usize,
        retriever: serde_json::Value,
    ) -> EvalReport {
        let denom = hit_ranks.len().saturating_sub(excluded).max(1) as f64;
        let accuracy = ks
            .iter()
            .map(|&k| {
                hit_ranks.iter().filter(|r| matches!(r, Some(rank) if *rank <= k)).count() as f64
                    / denom
            })
            .collect();
        EvalReport {
            ks: ks.to_vec(),
            accuracy,
            hit_ranks,
            excluded,
            retriever,
        }
    }

    pub fn write_json<W: Write>(&self, w: &mut W) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        writeln!(w, "{json}").map_err(|e| Error::io("<report>", e))
    }

    /// Per-question hit ranks as CSV, blank rank for misses.
    pub fn write_ranks_csv<W: Write>(&self, w: &mut W) -> Result<()> {
        writeln!(w, "question,rank").map_err(|e| Error::io("<ranks>", e))?;
        for (i, rank) in self.hit_ranks.iter().enumerate() {
            match rank {
                Some(r) => writeln!(w, "{i},{r}"),
                None => writeln!(w, "{i},"),
            }
            .map_err(|e| Error::io("<ranks>", e))?;
        }
        Ok(())
    }
}

fn check_ks(ks: &[usize]) -> Result<()> {
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 {
        return Err(Error::InvalidConfig {
            msg: "ks must be a non-empty strictly increasing list of positive depths".to_string(),
        });
    }
    Ok(())
}

/// Retrieve once at the deepest k per question and read accuracies off the
/// hit ranks. Questions whose retrieval fails are excluded and counted.
pub fn evaluate(
    retriever: &dyn Retriever,
    corpus: &Corpus,
    qa: &[QAExample],
    ks: &[usize],
    tokenizer: &Tokenizer,
) -> Result<EvalReport> {
    if qa.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    check_ks(ks)?;
    let max_k = *ks.last().unwrap();

    let outcomes: Vec<Result<Option<usize>>> = qa
        .par_iter()
        .map(|ex| {
            let answers: Vec<Vec<Token>> =
                ex.answers.iter().map(|a| tokenizer.tokenize(a)).collect();
            let hits = retriever.retrieve(&ex.question, max_k)?;
            for (i, hit) in hits.iter().enumerate() {
                let passage = corpus
                    .by_id(&hit.passage_id)
                    .ok_or_else(|| Error::UnknownPassage {
                        id: hit.passage_id.clone(),
                    })?;
                if has_answer(&passage_text_with_title(passage, tokenizer), &answers) {
                    return Ok(Some(i + 1));
                }
            }
            Ok(None)
        })
        .collect();

    let mut hit_ranks = Vec::with_capacity(qa.len());
    let mut excluded = 0;
    for outcome in outcomes {
        match outcome {
            Ok(rank) => hit_ranks.push(rank),
            Err(Error::UnknownPassage { id }) => return Err(Error::UnknownPassage { id }),
            Err(_) => {
                excluded += 1;
                hit_ranks.push(None);
            }
        }
    }
    Ok(EvalReport::from_ranks(ks, hit_ranks, excluded, retriever.identity()))
}

/// Evaluate pseudo-queries against the dense index: the positive passage is
/// the sole gold answer.
pub fn pseudo_eval(
    model: &EncoderModel,
    vocab: &Vocabulary,
    index: &DenseIndex,
    model_fingerprint: &str,
    held_out: &[PseudoExample],
    ks: &[usize],
    tokenizer: &Tokenizer,
) -> Result<EvalReport> {
    if held_out.is_empty() {
        return Err(Error::EmptyEvalSet);
    }
    check_ks(ks)?;
    let known: HashSet<&str> = (0..index.len()).map(|i| index.passage_id(i)).collect();
    for ex in held_out {
        if !known.contains(ex.positive_id.as_str()) {
            return Err(Error::UnknownPassage {
                id: ex.positive_id.clone(),
            });
        }
    }
    let max_k = *ks.last().unwrap();
    let hit_ranks: Vec<Option<usize>> = held_out
        .par_iter()
        .map(|ex| {
            let tokens: Vec<Token> =
                ex.query.iter().map(|s| tokenizer.classify(s.clone())).collect();
            let query_vec = model.encode(vocab, &tokens, None);
            let hits = index.search_vector(&query_vec, max_k)?;
            Ok(hits
                .iter()
                .position(|h| h.passage_id == ex.positive_id)
                .map(|i| i + 1))
        })
        .collect::<Result<Vec<Option<usize>>>>()?;
    let identity = serde_json::json!({
        "mode": "pseudo_eval",
        "model_fingerprint": model_fingerprint,
        "queries": held_out.len(),
        "passages": index.len(),
    });
    Ok(EvalReport::from_ranks(ks, hit_ranks, 0, identity))
}
