//! Exact maximum-inner-product search over encoded passages.
//!
//! The index is the full matrix of passage vectors; search scans every row.
//! Passages are encoded with the title prefix, queries without one.

use crate::artifact::{self, Header, UpstreamRef};
use crate::corpus::{passage_text_with_title, Corpus};
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::sparse::{rank_hits, ScoredHit};
use crate::tokenizer::{Token, Tokenizer, Vocabulary};
use ndarray::{Array1, Array2};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

pub const DENSE_KIND: &str = "dense_index";
pub const DENSE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseIndex {
    vectors: Array2<f64>,
    passage_ids: Vec<String>,
    /// Content hash of the checkpoint that encoded the rows.
    pub model_fingerprint: String,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BuildStats {
    pub truncated: usize,
    pub unk_substitutions: usize,
}

impl DenseIndex {
    /// Encode every passage in eval mode (no dropout). Passages are encoded
    /// in batches of `batch_size`; rows are placed at fixed ordinals, so
    /// parallel encoding is deterministic.
    pub fn build(
        model: &EncoderModel,
        vocab: &Vocabulary,
        corpus: &Corpus,
        tokenizer: &Tokenizer,
        batch_size: usize,
        model_fingerprint: String,
    ) -> (DenseIndex, BuildStats) {
        let d = model.config.embed_dim;
        let batch = batch_size.max(1);
        let rows: Vec<(Array1<f64>, usize, usize)> = corpus
            .passages()
            .par_chunks(batch)
            .flat_map_iter(|chunk| {
                chunk.iter().map(|p| {
                    let tokens = passage_text_with_title(p, tokenizer);
                    let (ids, unk, trunc) = model.prepare_ids(vocab, &tokens);
                    let (vec, _) = model.forward(&ids, None);
                    (vec, unk, trunc)
                })
            })
            .collect();
        let mut vectors = Array2::zeros((corpus.len(), d));
        let mut stats = BuildStats::default();
        for (i, (vec, unk, trunc)) in rows.into_iter().enumerate() {
            vectors.row_mut(i).assign(&vec);
            stats.unk_substitutions += unk;
            stats.truncated += usize::from(trunc > 0);
        }
        let passage_ids = corpus.passages().iter().map(|p| p.passage_id.clone()).collect();
        (
            DenseIndex {
                vectors,
                passage_ids,
                model_fingerprint,
            },
            stats,
        )
    }

    pub fn len(&self) -> usize {
        self.passage_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.passage_ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vector(&self, ordinal: usize) -> ndarray::ArrayView1<'_, f64> {
        self.vectors.row(ordinal)
    }

    pub fn passage_id(&self, ordinal: usize) -> &str {
        &self.passage_ids[ordinal]
    }

    fn check_fingerprint(&self, model_fingerprint: &str) -> Result<()> {
        if self.model_fingerprint != model_fingerprint {
            return Err(Error::FingerprintMismatch {
                index_fp: self.model_fingerprint.clone(),
                model_fp: model_fingerprint.to_string(),
            });
        }
        Ok(())
    }

    /// Exact top-k by inner product for an already-encoded query vector.
    pub fn search_vector(&self, query_vec: &Array1<f64>, k: usize) -> Result<Vec<ScoredHit>> {
        if query_vec.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                msg: format!("query dim {} vs index dim {}", query_vec.len(), self.dim()),
            });
        }
        let scores = self.vectors.dot(query_vec);
        let hits: Vec<ScoredHit> = scores
            .iter()
            .zip(&self.passage_ids)
            .map(|(&score, pid)| ScoredHit {
                passage_id: pid.clone(),
                score,
            })
            .collect();
        Ok(rank_hits(hits, k))
    }

    /// Encode the query (no title prefix) and scan all rows. The model must
    /// be the one the index was built from.
    pub fn search(
        &self,
        model: &EncoderModel,
        vocab: &Vocabulary,
        model_fingerprint: &str,
        query: &[Token],
        k: usize,
    ) -> Result<Vec<ScoredHit>> {
        self.check_fingerprint(model_fingerprint)?;
        let query_vec = model.encode(vocab, query, None);
        self.search_vector(&query_vec, k)
    }

    pub fn save<C: Serialize>(
        &self,
        path: &Path,
        config: &C,
        upstream: BTreeMap<String, UpstreamRef>,
    ) -> Result<()> {
        let header = Header::new(DENSE_KIND, DENSE_VERSION, config, upstream);
        let writer = artifact::create_writer(path)?;
        let mut w = artifact::BinWriter::new(writer, &header)?;
        w.write_str(&self.model_fingerprint)?;
        w.write_u64(self.len() as u64)?;
        w.write_u64(self.dim() as u64)?;
        for pid in &self.passage_ids {
            w.write_str(pid)?;
        }
        w.write_f64_slice(self.vectors.as_slice().expect("standard layout"))?;
        w.finish()
    }

    pub fn load(path: &Path) -> Result<(DenseIndex, Header)> {
        Self::load_from(artifact::open_reader(path)?)
    }

    pub fn load_from<R: Read>(reader: R) -> Result<(DenseIndex, Header)> {
        let mut r = artifact::BinReader::new(reader, DENSE_KIND, DENSE_VERSION)?;
        let model_fingerprint = r.read_str()?;
        let count = r.read_u64()? as usize;
        let dim = r.read_u64()? as usize;
        let mut passage_ids = Vec::with_capacity(count);
        for _ in 0..count {
            passage_ids.push(r.read_str()?);
        }
        let data = r.read_f64_vec()?;
        if data.len() != count * dim {
            return Err(Error::BadArtifact {
                expected: DENSE_KIND.to_string(),
                msg: format!("vector payload {} != {count}x{dim}", data.len()),
            });
        }
        let vectors = Array2::from_shape_vec((count, dim), data).expect("shape checked");
        let header = r.header.clone();
        Ok((
            DenseIndex {
                vectors,
                passage_ids,
                model_fingerprint,
            },
            header,
        ))
    }
}
