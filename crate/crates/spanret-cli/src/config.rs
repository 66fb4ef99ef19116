//! The aggregated run configuration and its flat key-value file format.
//!
//! Every subcommand resolves its settings as: built-in default, overridden
//! by the `--config` file, overridden by explicit flags. The resolved
//! snapshot is embedded in every artifact the run produces.

use serde::{Deserialize, Serialize};
use spanret::{Error, Result};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    // corpus
    pub passage_size: usize,
    // tokenizer
    pub min_count: u64,
    pub stopword_file: Option<String>,
    // span mining
    pub min_span_len: usize,
    pub max_span_len: usize,
    // example generation
    pub mode: String,
    pub negatives: u8,
    pub per_doc_cap: usize,
    pub seed: u64,
    // encoder
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
    // training
    pub batch_size: usize,
    pub total_steps: u64,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    // retrieval
    pub bm25_k1: f64,
    pub bm25_b: f64,
    pub alpha: f64,
    pub k_prime: usize,
    pub encode_batch: usize,
    pub eval_ks: Vec<usize>,
    // synth
    pub synth_docs: usize,
    pub synth_entities: usize,
    pub synth_passages_min: usize,
    pub synth_passages_max: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            passage_size: 100,
            min_count: 1,
            stopword_file: None,
            min_span_len: 2,
            max_span_len: 10,
            mode: "window_alternate".to_string(),
            negatives: 1,
            per_doc_cap: 1,
            seed: 0,
            embed_dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            max_seq_len: 128,
            dropout: 0.1,
            batch_size: 32,
            total_steps: 1000,
            peak_lr: 2e-5,
            warmup_fraction: 0.01,
            log_every: 50,
            checkpoint_every: 500,
            bm25_k1: 0.9,
            bm25_b: 0.4,
            alpha: 1.0,
            k_prime: 1000,
            encode_batch: 64,
            eval_ks: vec![1, 5, 20, 100],
            synth_docs: 200,
            synth_entities: 40,
            synth_passages_min: 5,
            synth_passages_max: 8,
        }
    }
}

fn parse_kv(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut map = BTreeMap::new();
    for (line_no, line) in text.lines().enumerate() {
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or(Error::MalformedRecord {
            line: line_no + 1,
            msg: "expected key=value".to_string(),
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(map)
}

fn set<T: std::str::FromStr>(target: &mut T, map: &BTreeMap<String, String>, key: &str) -> Result<()> {
    if let Some(raw) = map.get(key) {
        *target = raw.parse().map_err(|_| Error::InvalidConfig {
            msg: format!("config key {key}: cannot parse {raw:?}"),
        })?;
    }
    Ok(())
}

pub fn parse_ks(raw: &str) -> Result<Vec<usize>> {
    let ks: Vec<usize> = raw
        .split(',')
        .map(|s| s.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidConfig {
            msg: format!("cannot parse depth list {raw:?}"),
        })?;
    if ks.is_empty() || ks.windows(2).any(|w| w[0] >= w[1]) || ks[0] == 0 {
        return Err(Error::InvalidConfig {
            msg: format!("depth list must be strictly increasing and positive: {raw:?}"),
        });
    }
    Ok(ks)
}

impl RunConfig {
    /// Defaults overridden by the flat key=value config file.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let mut config = RunConfig::default();
        let Some(path) = path else {
            return Ok(config);
        };
        let map = parse_kv(path)?;
        set(&mut config.passage_size, &map, "passage_size")?;
        set(&mut config.min_count, &map, "min_count")?;
        if let Some(v) = map.get("stopword_file") {
            config.stopword_file = Some(v.clone());
        }
        set(&mut config.min_span_len, &map, "min_span_len")?;
        set(&mut config.max_span_len, &map, "max_span_len")?;
        set(&mut config.mode, &map, "mode")?;
        set(&mut config.negatives, &map, "negatives")?;
        set(&mut config.per_doc_cap, &map, "per_doc_cap")?;
        set(&mut config.seed, &map, "seed")?;
        set(&mut config.embed_dim, &map, "embed_dim")?;
        set(&mut config.layers, &map, "layers")?;
        set(&mut config.heads, &map, "heads")?;
        set(&mut config.ff_dim, &map, "ff_dim")?;
        set(&mut config.max_seq_len, &map, "max_seq_len")?;
        set(&mut config.dropout, &map, "dropout")?;
        set(&mut config.batch_size, &map, "batch_size")?;
        set(&mut config.total_steps, &map, "total_steps")?;
        set(&mut config.peak_lr, &map, "peak_lr")?;
        set(&mut config.warmup_fraction, &map, "warmup_fraction")?;
        set(&mut config.log_every, &map, "log_every")?;
        set(&mut config.checkpoint_every, &map, "checkpoint_every")?;
        set(&mut config.bm25_k1, &map, "bm25_k1")?;
        set(&mut config.bm25_b, &map, "bm25_b")?;
        set(&mut config.alpha, &map, "alpha")?;
        set(&mut config.k_prime, &map, "k_prime")?;
        set(&mut config.encode_batch, &map, "encode_batch")?;
        if let Some(raw) = map.get("eval_ks") {
            config.eval_ks = parse_ks(raw)?;
        }
        set(&mut config.synth_docs, &map, "synth_docs")?;
        set(&mut config.synth_entities, &map, "synth_entities")?;
        set(&mut config.synth_passages_min, &map, "synth_passages_min")?;
        set(&mut config.synth_passages_max, &map, "synth_passages_max")?;

        let known = [
            "passage_size", "min_count", "stopword_file", "min_span_len", "max_span_len",
            "mode", "negatives", "per_doc_cap", "seed", "embed_dim", "layers", "heads",
            "ff_dim", "max_seq_len", "dropout", "batch_size", "total_steps", "peak_lr",
            "warmup_fraction", "log_every", "checkpoint_every", "bm25_k1", "bm25_b", "alpha",
            "k_prime", "encode_batch", "eval_ks", "synth_docs", "synth_entities",
            "synth_passages_min", "synth_passages_max",
        ];
        for key in map.keys() {
            if !known.contains(&key.as_str()) {
                return Err(Error::InvalidConfig {
                    msg: format!("unknown config key {key:?}"),
                });
            }
        }
        Ok(config)
    }

    /// The snapshot embedded in artifact headers.
    pub fn snapshot(&self, subcommand: &str) -> serde_json::Value {
        serde_json::json!({
            "subcommand": subcommand,
            "run": self,
        })
    }
}
