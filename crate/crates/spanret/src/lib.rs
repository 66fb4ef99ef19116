//! Self-supervised dense retrieval at desk scale.
//!
//! The pipeline mines cross-passage recurring spans, synthesizes contrastive
//! pseudo-examples, trains a small shared-weight dual encoder with in-batch
//! negatives, and serves dense (exact inner-product), sparse (BM25) and
//! hybrid retrieval with a top-k accuracy evaluation harness.
//!
//! Stages communicate through versioned artifacts; every artifact embeds the
//! config snapshot that produced it and the hashes of everything it
//! consumed, and every stage replays bit-identically from its seed.

pub mod artifact;
pub mod corpus;
pub mod dense;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod examples;
pub mod hybrid;
pub mod mining;
pub mod sparse;
pub mod synth;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};

/// Cap worker parallelism from `SPANRET_THREADS`. Call once at startup;
/// later calls are no-ops. Results never depend on the thread count — all
/// parallel reductions run in a fixed order.
pub fn init_threads_from_env() {
    if let Ok(value) = std::env::var("SPANRET_THREADS") {
        if let Ok(n) = value.trim().parse::<usize>() {
            if n >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}
