//! Synthetic document generator for pipeline runs and acceptance tests.
//!
//! Each document gets a disjoint topic vocabulary plus shared common words,
//! and plants one or two multi-token entity spans in at least two passages,
//! with at least one passage left entity-free. Guard words around each
//! planted occurrence differ across occurrences, so a planted entity is
//! always a *maximal* recurring span and the miner provably recovers it.
//!
//! Filler words are open-syllable pairs or triples; entity words always
//! carry an internal consonant cluster, so the two vocabularies can never
//! collide and entities occur only where planted.

use crate::corpus::Document;
use crate::encoder::derive_seed;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

const FILLER_SYLLABLES: [&str; 20] = [
    "ba", "ce", "di", "fo", "gu", "ha", "ki", "lo", "mu", "ne", "po", "ra", "su", "ta", "vi",
    "wa", "ze", "jo", "ke", "ry",
];

const ENTITY_SYLLABLES: [&str; 12] = [
    "zan", "qor", "vex", "plu", "gri", "thal", "mok", "fyn", "dra", "bel", "nix", "tur",
];

const COMMON_WORDS: usize = 15;
const TOPIC_WORDS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub docs: usize,
    pub entities: usize,
    pub seed: u64,
    pub passages_per_doc_min: usize,
    pub passages_per_doc_max: usize,
    /// Planned tokens per passage; ingest with the same value keeps planted
    /// spans inside passage boundaries.
    pub passage_size: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            docs: 200,
            entities: 40,
            seed: 0,
            passages_per_doc_min: 5,
            passages_per_doc_max: 8,
            passage_size: 12,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.docs < 1 || self.entities < 1 {
            return Err(Error::InvalidConfig {
                msg: "docs and entities must be >= 1".to_string(),
            });
        }
        if self.passages_per_doc_min < 3 || self.passages_per_doc_max < self.passages_per_doc_min {
            return Err(Error::InvalidConfig {
                msg: "passages_per_doc_min must be >= 3 and <= passages_per_doc_max".to_string(),
            });
        }
        if self.passage_size < 8 {
            return Err(Error::InvalidConfig {
                msg: "passage_size must be >= 8 to fit guarded entity spans".to_string(),
            });
        }
        Ok(())
    }
}

/// What was planted where; the ground truth for recovery checks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedSpan {
    pub doc_id: String,
    pub entity: Vec<String>,
    /// Passage positions (pre-chunking plan) holding one occurrence each.
    pub passage_positions: Vec<usize>,
}

fn common_word(i: usize) -> String {
    let a = FILLER_SYLLABLES[(i * 3) % 20];
    let b = FILLER_SYLLABLES[(i * 7 + 1) % 20];
    format!("{a}{b}")
}

/// Topic words are 3-syllable and doc-indexed, so documents get disjoint
/// topic vocabularies (up to 8000 combinations).
fn topic_word(global_index: usize) -> String {
    let a = FILLER_SYLLABLES[global_index % 20];
    let b = FILLER_SYLLABLES[(global_index / 20) % 20];
    let c = FILLER_SYLLABLES[(global_index / 400) % 20];
    format!("{a}{b}{c}")
}

/// Entity i as its token sequence; lengths cycle 2, 3, 4.
pub fn entity_tokens(i: usize) -> Vec<String> {
    let len = 2 + i % 3;
    (0..len)
        .map(|j| {
            let a = ENTITY_SYLLABLES[(i * 5 + j * 3) % 12];
            let b = ENTITY_SYLLABLES[(i * 7 + j * 11 + 1) % 12];
            format!("{a}{b}")
        })
        .collect()
}

pub struct SynthOutput {
    pub documents: Vec<Document>,
    pub planted: Vec<PlantedSpan>,
}

struct DocPlan {
    passages: Vec<Vec<String>>,
}

impl DocPlan {
    // Plant one entity occurrence per listed passage, with guard words that
    // differ across occurrences (occurrence j gets guards topic[2j], topic[2j+1]).
    fn plant(
        &mut self,
        entity: &[String],
        passage_positions: &[usize],
        topics: &[String],
        rng: &mut ChaCha8Rng,
        guard_base: usize,
    ) {
        for (j, &pi) in passage_positions.iter().enumerate() {
            let tokens = &mut self.passages[pi];
            let offset = rng.gen_range(1..=tokens.len() - entity.len() - 1);
            tokens[offset - 1] = topics[(guard_base + 2 * j) % topics.len()].clone();
            for (g, word) in entity.iter().enumerate() {
                tokens[offset + g] = word.clone();
            }
            tokens[offset + entity.len()] = topics[(guard_base + 2 * j + 1) % topics.len()].clone();
        }
    }
}

/// Generate the synthetic document set. Deterministic in the config.
pub fn generate(config: &SynthConfig) -> Result<SynthOutput> {
    config.validate()?;
    let mut documents = Vec::with_capacity(config.docs);
    let mut planted = Vec::new();

    for di in 0..config.docs {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0x0D0C + di as u64));
        let doc_id = format!("doc{di:04}");
        let topics: Vec<String> = (0..TOPIC_WORDS)
            .map(|t| topic_word(di * TOPIC_WORDS + t))
            .collect();
        let n_passages =
            rng.gen_range(config.passages_per_doc_min..=config.passages_per_doc_max);

        let mut plan = DocPlan {
            passages: (0..n_passages)
                .map(|_| {
                    (0..config.passage_size)
                        .map(|_| {
                            if rng.gen_bool(0.7) {
                                topics[rng.gen_range(0..topics.len())].clone()
                            } else {
                                common_word(rng.gen_range(0..COMMON_WORDS))
                            }
                        })
                        .collect()
                })
                .collect(),
        };

        // primary entity in 2-3 passages, secondary (when room) in 2 more,
        // always leaving at least one passage entity-free
        let primary = entity_tokens(di % config.entities);
        let primary_count = (2 + rng.gen_range(0..2usize)).min(n_passages - 1);
        let mut positions: Vec<usize> = (0..n_passages).collect();
        for i in 0..primary_count {
            let j = rng.gen_range(i..positions.len());
            positions.swap(i, j);
        }
        let primary_positions: Vec<usize> = {
            let mut p = positions[..primary_count].to_vec();
            p.sort_unstable();
            p
        };
        plan.plant(&primary, &primary_positions, &topics, &mut rng, 0);
        planted.push(PlantedSpan {
            doc_id: doc_id.clone(),
            entity: primary.clone(),
            passage_positions: primary_positions.clone(),
        });

        if n_passages >= primary_count + 3 {
            let secondary = entity_tokens((di * 7 + 3) % config.entities);
            if secondary != primary {
                let free: Vec<usize> = (0..n_passages)
                    .filter(|p| !primary_positions.contains(p))
                    .collect();
                // keep one free passage entity-less
                let mut picks = free.clone();
                for i in 0..2 {
                    let j = rng.gen_range(i..picks.len() - 1);
                    picks.swap(i, j);
                }
                let secondary_positions: Vec<usize> = {
                    let mut p = picks[..2].to_vec();
                    p.sort_unstable();
                    p
                };
                plan.plant(&secondary, &secondary_positions, &topics, &mut rng, 7);
                planted.push(PlantedSpan {
                    doc_id: doc_id.clone(),
                    entity: secondary,
                    passage_positions: secondary_positions,
                });
            }
        }

        let title = primary.join(" ");
        let body = plan
            .passages
            .iter()
            .map(|p| p.join(" "))
            .collect::<Vec<_>>()
            .join(" ");
        documents.push(Document {
            doc_id,
            title,
            body,
        });
    }
    Ok(SynthOutput { documents, planted })
}

/// Write documents as corpus-input JSON-lines with a leading provenance
/// header (ingest skips it).
pub fn write_documents<W: Write>(
    w: &mut W,
    output: &SynthOutput,
    config: &SynthConfig,
) -> Result<()> {
    let header = crate::artifact::Header::new("documents", 1, config, Default::default());
    crate::artifact::write_jsonl_header(w, &header)?;
    for doc in &output.documents {
        let line = serde_json::to_string(&serde_json::json!({
            "id": doc.doc_id,
            "title": doc.title,
            "text": doc.body,
        }))
        .expect("doc serializes");
        writeln!(w, "{line}").map_err(|e| Error::io("<documents>", e))?;
    }
    Ok(())
}
