//! Dense-sparse score fusion over the union of both retrievers' candidates.
//!
//! `s_hybrid(q, p) = s_dense(q, p) + alpha * bm25(q, p)` over the union of
//! the two top-k' lists. A candidate missing from one list takes that list's
//! minimum score (zero when the list is empty). Candidates in neither list
//! are unreachable by construction.

use crate::error::{Error, Result};
use crate::sparse::{rank_hits, ScoredHit};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HybridConfig {
    /// Candidate depth fetched from each retriever.
    pub k_prime: usize,
    /// Sparse weight; the dense weight is fixed at 1.
    pub alpha: f64,
    /// Final depth returned.
    pub k: usize,
}

impl Default for HybridConfig {
    fn default() -> Self {
        HybridConfig {
            k_prime: 1000,
            alpha: 1.0,
            k: 20,
        }
    }
}

impl HybridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k > self.k_prime {
            return Err(Error::InvalidConfig {
                msg: format!("k ({}) must be <= k_prime ({})", self.k, self.k_prime),
            });
        }
        if !(self.alpha >= 0.0) {
            return Err(Error::InvalidConfig {
                msg: format!("alpha ({}) must be >= 0", self.alpha),
            });
        }
        Ok(())
    }
}

fn score_map(hits: &[ScoredHit]) -> Result<HashMap<&str, f64>> {
    let mut map = HashMap::with_capacity(hits.len());
    for hit in hits {
        if map.insert(hit.passage_id.as_str(), hit.score).is_some() {
            return Err(Error::DuplicateHit {
                id: hit.passage_id.clone(),
            });
        }
    }
    Ok(map)
}

fn min_score(hits: &[ScoredHit]) -> f64 {
    hits.iter().map(|h| h.score).fold(f64::INFINITY, f64::min)
}

/// Fuse two genuine top-k' lists into the hybrid top-k.
pub fn fuse(
    dense_hits: &[ScoredHit],
    sparse_hits: &[ScoredHit],
    config: &HybridConfig,
) -> Result<Vec<ScoredHit>> {
    config.validate()?;
    let dense = score_map(dense_hits)?;
    let sparse = score_map(sparse_hits)?;
    let dense_min = if dense_hits.is_empty() { 0.0 } else { min_score(dense_hits) };
    let sparse_min = if sparse_hits.is_empty() { 0.0 } else { min_score(sparse_hits) };

    let mut candidates: Vec<&str> = dense.keys().chain(sparse.keys()).copied().collect();
    candidates.sort_unstable();
    candidates.dedup();

    let fused: Vec<ScoredHit> = candidates
        .into_iter()
        .map(|pid| {
            let d = dense.get(pid).copied().unwrap_or(dense_min);
            let s = sparse.get(pid).copied().unwrap_or(sparse_min);
            ScoredHit {
                passage_id: pid.to_string(),
                score: d + config.alpha * s,
            }
        })
        .collect();
    Ok(rank_hits(fused, config.k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hit(id: &str, score: f64) -> ScoredHit {
        ScoredHit {
            passage_id: id.to_string(),
            score,
        }
    }

    fn config(k: usize, k_prime: usize, alpha: f64) -> HybridConfig {
        HybridConfig { k_prime, alpha, k }
    }

    #[test]
    fn candidate_in_both_lists_sums() {
        let dense = vec![hit("p1", 2.0), hit("p2", 1.0)];
        let sparse = vec![hit("p1", 3.0), hit("p2", 0.5)];
        let fused = fuse(&dense, &sparse, &config(2, 10, 1.0)).unwrap();
        assert_eq!(fused[0].passage_id, "p1");
        assert_eq!(fused[0].score, 5.0);
    }

    #[test]
    fn dense_only_candidate_takes_sparse_minimum() {
        // sparse list minimum is 1.5; p9 appears only in the dense list
        let dense = vec![hit("p9", 2.0), hit("p1", 1.0)];
        let sparse = vec![hit("p1", 4.0), hit("p2", 1.5)];
        let fused = fuse(&dense, &sparse, &config(3, 10, 1.0)).unwrap();
        let p9 = fused.iter().find(|h| h.passage_id == "p9").unwrap();
        assert_eq!(p9.score, 2.0 + 1.5);
    }

    #[test]
    fn sparse_only_candidate_takes_dense_minimum() {
        let dense = vec![hit("p1", 2.0), hit("p2", 0.25)];
        let sparse = vec![hit("p7", 3.0)];
        let fused = fuse(&dense, &sparse, &config(3, 10, 1.0)).unwrap();
        let p7 = fused.iter().find(|h| h.passage_id == "p7").unwrap();
        assert_eq!(p7.score, 0.25 + 3.0);
    }

    #[test]
    fn empty_list_imputes_zero() {
        let dense = vec![hit("p1", 2.0)];
        let fused = fuse(&dense, &[], &config(1, 10, 1.0)).unwrap();
        assert_eq!(fused[0].score, 2.0);

        let sparse = vec![hit("p1", 0.75)];
        let fused = fuse(&[], &sparse, &config(1, 10, 1.0)).unwrap();
        assert_eq!(fused[0].score, 0.75);
    }

    #[test]
    fn duplicate_ids_in_one_list_are_a_hard_error() {
        let dense = vec![hit("p1", 2.0), hit("p1", 1.0)];
        let err = fuse(&dense, &[], &config(1, 10, 1.0)).unwrap_err();
        assert!(matches!(err, Error::DuplicateHit { .. }));
    }

    #[test]
    fn every_fused_hit_comes_from_an_input_list() {
        let dense = vec![hit("a", 3.0), hit("b", 2.0)];
        let sparse = vec![hit("c", 5.0), hit("b", 1.0)];
        let fused = fuse(&dense, &sparse, &config(3, 10, 1.0)).unwrap();
        for h in &fused {
            assert!(
                dense.iter().chain(&sparse).any(|x| x.passage_id == h.passage_id),
                "{} not in any input",
                h.passage_id
            );
        }
        assert_eq!(fused.len(), 3);
    }

    #[test]
    fn alpha_zero_reduces_to_dense_over_the_union() {
        // all candidates absent from the sparse list: the sparse component
        // contributes the same constant regardless, and at alpha=0 nothing
        let dense = vec![hit("a", 3.0), hit("b", 2.0), hit("c", 1.0)];
        let sparse = vec![hit("z", 9.0)];
        let fused = fuse(&dense, &sparse, &config(4, 10, 0.0)).unwrap();
        let order: Vec<&str> = fused.iter().map(|h| h.passage_id.as_str()).collect();
        // z has no dense score → dense_min 1.0; ties with c, id order applies
        assert_eq!(order, vec!["a", "b", "c", "z"]);
        assert_eq!(fused[0].score, 3.0);
    }

    #[test]
    fn ties_break_by_ascending_passage_id() {
        let dense = vec![hit("b", 1.0), hit("a", 1.0)];
        let sparse = vec![hit("b", 2.0), hit("a", 2.0)];
        let fused = fuse(&dense, &sparse, &config(2, 10, 1.0)).unwrap();
        assert_eq!(fused[0].passage_id, "a");
        assert_eq!(fused[1].passage_id, "b");
    }

    #[test]
    fn k_larger_than_k_prime_is_rejected() {
        let err = fuse(&[], &[], &config(11, 10, 1.0)).unwrap_err();
        assert!(matches!(err, Error::InvalidConfig { .. }));
    }
}
