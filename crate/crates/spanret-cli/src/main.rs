//! Pipeline driver: synth → ingest → mine → generate → train → index →
//! search → eval, each stage reading and writing versioned artifacts.
//!
//! Exit codes: 0 success, 1 hard error, 2 usage, 3 missing file,
//! 4 artifact version mismatch.

mod config;

use clap::{Parser, Subcommand};
use config::{parse_ks, RunConfig};
use spanret::artifact::{self, UpstreamRef};
use spanret::corpus::{self, token_counts};
use spanret::dense::DenseIndex;
use spanret::encoder::{EncoderConfig, EncoderModel};
use spanret::eval::{evaluate, load_qa_path, DenseRetriever, HybridRetriever, Retriever, SparseRetriever};
use spanret::examples::{self, GenerateConfig, TransformMode};
use spanret::hybrid::HybridConfig;
use spanret::mining;
use spanret::sparse::InvertedIndex;
use spanret::synth::{self, SynthConfig};
use spanret::tokenizer::{Tokenizer, Vocabulary};
use spanret::train::{
    self, model_fingerprint, prepare_examples, CheckpointSpec, OptimizerHyper, OptimizerState,
    TrainConfig,
};
use spanret::{Error, Result};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "spanret", version, about = "Self-supervised retrieval pipeline")]
struct Cli {
    /// Flat key=value config file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic document collection with planted recurring spans.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        docs: Option<usize>,
        #[arg(long)]
        entities: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        passages_min: Option<usize>,
        #[arg(long)]
        passages_max: Option<usize>,
        #[arg(long)]
        passage_size: Option<usize>,
    },
    /// Chunk a JSON-lines document file into a passage corpus.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        passage_size: Option<usize>,
    },
    /// Mine cross-passage recurring spans per document.
    Mine {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        min_span_len: Option<usize>,
        #[arg(long)]
        max_span_len: Option<usize>,
        #[arg(long)]
        stopword_file: Option<PathBuf>,
    },
    /// Turn mined spans into pseudo-query training triples.
    Generate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        spans: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        negatives: Option<u8>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        per_doc_cap: Option<usize>,
    },
    /// Train the dual encoder; writes checkpoint, vocabulary and metrics.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        examples: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long)]
        out_vocab: PathBuf,
        #[arg(long)]
        out_metrics: PathBuf,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        total_steps: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        peak_lr: Option<f64>,
        #[arg(long)]
        warmup_fraction: Option<f64>,
        #[arg(long)]
        negatives: Option<u8>,
        #[arg(long)]
        min_count: Option<u64>,
        #[arg(long)]
        embed_dim: Option<usize>,
        #[arg(long)]
        layers: Option<usize>,
        #[arg(long)]
        heads: Option<usize>,
        #[arg(long)]
        ff_dim: Option<usize>,
        #[arg(long)]
        max_seq_len: Option<usize>,
        #[arg(long)]
        dropout: Option<f64>,
        #[arg(long)]
        log_every: Option<u64>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        #[arg(long)]
        stopword_file: Option<PathBuf>,
    },
    /// Build the BM25 inverted index.
    IndexSparse {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        k1: Option<f64>,
        #[arg(long)]
        b: Option<f64>,
        #[arg(long)]
        stopword_file: Option<PathBuf>,
    },
    /// Encode all passages into the exact-search dense index.
    IndexDense {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        encode_batch: Option<usize>,
        #[arg(long)]
        stopword_file: Option<PathBuf>,
    },
    /// Retrieve top-k passages for one query.
    Search {
        #[arg(long, value_parser = ["dense", "sparse", "hybrid"])]
        mode: String,
        #[arg(long)]
        query: String,
        #[arg(long, default_value_t = 20)]
        k: usize,
        #[arg(long)]
        k_prime: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        sparse_index: Option<PathBuf>,
        #[arg(long)]
        dense_index: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        stopword_file: Option<PathBuf>,
    },
    /// Top-k retrieval accuracy on a QA set.
    Eval {
        #[arg(long, value_parser = ["dense", "sparse", "hybrid"])]
        mode: String,
        #[arg(long)]
        qa: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ks: Option<String>,
        #[arg(long)]
        out_report: PathBuf,
        #[arg(long)]
        out_ranks: PathBuf,
        #[arg(long)]
        k_prime: Option<usize>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        sparse_index: Option<PathBuf>,
        #[arg(long)]
        dense_index: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        vocab: Option<PathBuf>,
        #[arg(long)]
        stopword_file: Option<PathBuf>,
    },
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::MissingFile { .. } => 3,
        Error::VersionMismatch { .. } => 4,
        _ => 1,
    }
}

fn main() {
    let cli = Cli::parse();
    spanret::init_threads_from_env();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

fn tokenizer_for(stopword_file: Option<&Path>, config: &RunConfig) -> Result<Tokenizer> {
    match stopword_file
        .map(Path::to_path_buf)
        .or_else(|| config.stopword_file.as_ref().map(PathBuf::from))
    {
        Some(path) => Tokenizer::from_stopword_file(&path),
        None => Ok(Tokenizer::new()),
    }
}

fn override_opt<T>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

fn upstream(map: &mut BTreeMap<String, UpstreamRef>, name: &str, path: &Path) -> Result<()> {
    map.insert(name.to_string(), artifact::upstream_ref(path)?);
    Ok(())
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    Vocabulary::load(artifact::open_reader(path)?)
}

fn run(cli: Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Synth {
            out,
            docs,
            entities,
            seed,
            passages_min,
            passages_max,
            passage_size,
        } => {
            override_opt(&mut config.synth_docs, docs);
            override_opt(&mut config.synth_entities, entities);
            override_opt(&mut config.seed, seed);
            override_opt(&mut config.synth_passages_min, passages_min);
            override_opt(&mut config.synth_passages_max, passages_max);
            override_opt(&mut config.passage_size, passage_size);
            let synth_config = SynthConfig {
                docs: config.synth_docs,
                entities: config.synth_entities,
                seed: config.seed,
                passages_per_doc_min: config.synth_passages_min,
                passages_per_doc_max: config.synth_passages_max,
                passage_size: config.passage_size,
            };
            let output = synth::generate(&synth_config)?;
            let mut w = artifact::create_writer(&out)?;
            synth::write_documents(&mut w, &output, &synth_config)?;
            println!(
                "synth: {} documents, {} planted spans -> {}",
                output.documents.len(),
                output.planted.len(),
                out.display()
            );
        }

        Command::Ingest {
            input,
            output,
            passage_size,
        } => {
            override_opt(&mut config.passage_size, passage_size);
            let tokenizer = tokenizer_for(None, &config)?;
            let reader = artifact::open_reader(&input)?;
            let (corpus, stats) = corpus::ingest(reader, config.passage_size, &tokenizer)?;
            let mut up = BTreeMap::new();
            upstream(&mut up, "input", &input)?;
            let mut w = artifact::create_writer(&output)?;
            corpus::save(&mut w, &corpus, &config.snapshot("ingest"), up)?;
            println!(
                "ingest: {} docs -> {} passages ({} empty docs skipped) -> {}",
                stats.documents,
                corpus.len(),
                stats.skipped_empty,
                output.display()
            );
        }

        Command::Mine {
            corpus: corpus_path,
            output,
            min_span_len,
            max_span_len,
            stopword_file,
        } => {
            override_opt(&mut config.min_span_len, min_span_len);
            override_opt(&mut config.max_span_len, max_span_len);
            if let Some(path) = &stopword_file {
                config.stopword_file = Some(path.display().to_string());
            }
            let tokenizer = tokenizer_for(stopword_file.as_deref(), &config)?;
            let (corpus, _) = corpus::load_path(&corpus_path, &tokenizer)?;
            let (store, stats) =
                mining::mine_corpus(&corpus, config.min_span_len, config.max_span_len);
            let mut up = BTreeMap::new();
            upstream(&mut up, "corpus", &corpus_path)?;
            let mut w = artifact::create_writer(&output)?;
            mining::save(&mut w, &store, &stats, &config.snapshot("mine"), up)?;
            println!(
                "mine: {} docs -> {} spans (rejected: {} single-passage, {} stopword-only, {} non-maximal) -> {}",
                corpus.doc_count(),
                stats.emitted,
                stats.rejected_single_passage,
                stats.rejected_all_stopwords,
                stats.rejected_not_maximal,
                output.display()
            );
        }

        Command::Generate {
            corpus: corpus_path,
            spans,
            output,
            mode,
            negatives,
            seed,
            per_doc_cap,
        } => {
            override_opt(&mut config.mode, mode);
            override_opt(&mut config.negatives, negatives);
            override_opt(&mut config.seed, seed);
            override_opt(&mut config.per_doc_cap, per_doc_cap);
            let tokenizer = tokenizer_for(None, &config)?;
            let (corpus, _) = corpus::load_path(&corpus_path, &tokenizer)?;
            let (store, _) = mining::load_path(&spans)?;
            let gen_config = GenerateConfig {
                mode: config.mode.parse::<TransformMode>()?,
                negatives_per_query: config.negatives,
                per_doc_cap: config.per_doc_cap,
                seed: config.seed,
            };
            let (example_list, stats) = examples::generate(&corpus, &store, &gen_config)?;
            let mut up = BTreeMap::new();
            upstream(&mut up, "corpus", &corpus_path)?;
            upstream(&mut up, "spans", &spans)?;
            let mut w = artifact::create_writer(&output)?;
            examples::save(&mut w, &example_list, &config.snapshot("generate"), up)?;
            println!(
                "generate: {} examples (skipped: {} no-negative, {} empty-query, {} span-too-long, {} prefix-at-start) -> {}",
                stats.emitted,
                stats.skipped_no_negative,
                stats.skipped_empty_query,
                stats.skipped_span_too_long,
                stats.skipped_prefix_at_start,
                output.display()
            );
        }

        Command::Train {
            corpus: corpus_path,
            examples: examples_path,
            out_checkpoint,
            out_vocab,
            out_metrics,
            batch_size,
            total_steps,
            seed,
            peak_lr,
            warmup_fraction,
            negatives,
            min_count,
            embed_dim,
            layers,
            heads,
            ff_dim,
            max_seq_len,
            dropout,
            log_every,
            checkpoint_every,
            stopword_file,
        } => {
            override_opt(&mut config.batch_size, batch_size);
            override_opt(&mut config.total_steps, total_steps);
            override_opt(&mut config.seed, seed);
            override_opt(&mut config.peak_lr, peak_lr);
            override_opt(&mut config.warmup_fraction, warmup_fraction);
            override_opt(&mut config.negatives, negatives);
            override_opt(&mut config.min_count, min_count);
            override_opt(&mut config.embed_dim, embed_dim);
            override_opt(&mut config.layers, layers);
            override_opt(&mut config.heads, heads);
            override_opt(&mut config.ff_dim, ff_dim);
            override_opt(&mut config.max_seq_len, max_seq_len);
            override_opt(&mut config.dropout, dropout);
            override_opt(&mut config.log_every, log_every);
            override_opt(&mut config.checkpoint_every, checkpoint_every);
            if let Some(path) = &stopword_file {
                config.stopword_file = Some(path.display().to_string());
            }

            let tokenizer = tokenizer_for(stopword_file.as_deref(), &config)?;
            let (corpus, _) = corpus::load_path(&corpus_path, &tokenizer)?;
            let (example_list, _) = examples::load_path(&examples_path)?;

            let counts = token_counts(&corpus, &tokenizer);
            let vocab = Vocabulary::from_counts(&counts, config.min_count);
            {
                let mut w = artifact::create_writer(&out_vocab)?;
                vocab.save(&mut w)?;
            }

            let encoder_config = EncoderConfig {
                vocab_size: vocab.len(),
                embed_dim: config.embed_dim,
                layers: config.layers,
                heads: config.heads,
                ff_dim: config.ff_dim,
                max_seq_len: config.max_seq_len,
                dropout: config.dropout,
            };
            let mut model = EncoderModel::new(encoder_config.clone(), config.seed)?;
            let hyper =
                OptimizerHyper::new(config.peak_lr, config.warmup_fraction, config.total_steps);
            let mut opt = OptimizerState::new(&encoder_config, hyper);
            let use_negatives = config.negatives == 1;
            let prepared = prepare_examples(
                &model,
                &vocab,
                &corpus,
                &tokenizer,
                &example_list,
                use_negatives,
            )?;

            let mut up = BTreeMap::new();
            upstream(&mut up, "corpus", &corpus_path)?;
            upstream(&mut up, "examples", &examples_path)?;
            upstream(&mut up, "vocab", &out_vocab)?;
            let spec = CheckpointSpec {
                path: out_checkpoint.clone(),
                config: config.snapshot("train"),
                upstream: up,
            };
            let train_config = TrainConfig {
                batch_size: config.batch_size,
                total_steps: config.total_steps,
                seed: config.seed,
                peak_lr: config.peak_lr,
                warmup_fraction: config.warmup_fraction,
                use_negatives,
                log_every: config.log_every,
                checkpoint_every: config.checkpoint_every,
            };
            let outcome =
                train::train(&mut model, &mut opt, &prepared, &train_config, Some(&spec))?;
            {
                let mut w = artifact::create_writer(&out_metrics)?;
                train::write_metrics_csv(&mut w, &outcome.metrics)?;
            }
            let last = outcome.metrics.last().expect("at least one metrics row");
            println!(
                "train: {} steps on {} examples, final loss {:.4}, in-batch top-1 {:.3} -> {}",
                config.total_steps,
                prepared.len(),
                last.loss,
                last.top1,
                out_checkpoint.display()
            );
        }

        Command::IndexSparse {
            corpus: corpus_path,
            output,
            k1,
            b,
            stopword_file,
        } => {
            override_opt(&mut config.bm25_k1, k1);
            override_opt(&mut config.bm25_b, b);
            let tokenizer = tokenizer_for(stopword_file.as_deref(), &config)?;
            let (corpus, _) = corpus::load_path(&corpus_path, &tokenizer)?;
            let index = InvertedIndex::build(&corpus, &tokenizer, config.bm25_k1, config.bm25_b);
            let mut up = BTreeMap::new();
            upstream(&mut up, "corpus", &corpus_path)?;
            index.save(&output, &config.snapshot("index-sparse"), up)?;
            println!(
                "index-sparse: {} passages, avg length {:.2} -> {}",
                index.passage_count(),
                index.avg_doc_length(),
                output.display()
            );
        }

        Command::IndexDense {
            corpus: corpus_path,
            checkpoint,
            vocab: vocab_path,
            output,
            encode_batch,
            stopword_file,
        } => {
            override_opt(&mut config.encode_batch, encode_batch);
            let tokenizer = tokenizer_for(stopword_file.as_deref(), &config)?;
            let (corpus, _) = corpus::load_path(&corpus_path, &tokenizer)?;
            let (model, _, _) = train::load_checkpoint(&checkpoint)?;
            let vocab = load_vocab(&vocab_path)?;
            let fingerprint = model_fingerprint(&checkpoint)?;
            let (index, stats) = DenseIndex::build(
                &model,
                &vocab,
                &corpus,
                &tokenizer,
                config.encode_batch,
                fingerprint,
            );
            let mut up = BTreeMap::new();
            upstream(&mut up, "corpus", &corpus_path)?;
            upstream(&mut up, "checkpoint", &checkpoint)?;
            upstream(&mut up, "vocab", &vocab_path)?;
            index.save(&output, &config.snapshot("index-dense"), up)?;
            println!(
                "index-dense: {} vectors of dim {} ({} truncated) -> {}",
                index.len(),
                index.dim(),
                stats.truncated,
                output.display()
            );
        }

        Command::Search {
            mode,
            query,
            k,
            k_prime,
            alpha,
            sparse_index,
            dense_index,
            checkpoint,
            vocab,
            stopword_file,
        } => {
            override_opt(&mut config.k_prime, k_prime);
            override_opt(&mut config.alpha, alpha);
            let tokenizer = tokenizer_for(stopword_file.as_deref(), &config)?;
            let stack = RetrievalStack::load(
                &mode,
                sparse_index.as_deref(),
                dense_index.as_deref(),
                checkpoint.as_deref(),
                vocab.as_deref(),
            )?;
            let retriever = stack.retriever(&mode, &tokenizer, &config, k)?;
            let hits = retriever.retrieve(&query, k)?;
            for (rank, hit) in hits.iter().enumerate() {
                let line = serde_json::json!({
                    "rank": rank + 1,
                    "passage_id": hit.passage_id,
                    "score": hit.score,
                });
                println!("{line}");
            }
        }

        Command::Eval {
            mode,
            qa,
            corpus: corpus_path,
            ks,
            out_report,
            out_ranks,
            k_prime,
            alpha,
            sparse_index,
            dense_index,
            checkpoint,
            vocab,
            stopword_file,
        } => {
            override_opt(&mut config.k_prime, k_prime);
            override_opt(&mut config.alpha, alpha);
            if let Some(raw) = ks {
                config.eval_ks = parse_ks(&raw)?;
            }
            let tokenizer = tokenizer_for(stopword_file.as_deref(), &config)?;
            let (corpus, _) = corpus::load_path(&corpus_path, &tokenizer)?;
            let qa_set = load_qa_path(&qa, &tokenizer)?;
            let stack = RetrievalStack::load(
                &mode,
                sparse_index.as_deref(),
                dense_index.as_deref(),
                checkpoint.as_deref(),
                vocab.as_deref(),
            )?;
            let max_k = *config.eval_ks.last().unwrap();
            let retriever = stack.retriever(&mode, &tokenizer, &config, max_k)?;
            let mut report =
                evaluate(retriever.as_ref(), &corpus, &qa_set, &config.eval_ks, &tokenizer)?;
            report.retriever = serde_json::json!({
                "identity": report.retriever,
                "config": config.snapshot("eval"),
            });
            {
                let mut w = artifact::create_writer(&out_report)?;
                report.write_json(&mut w)?;
            }
            {
                let mut w = artifact::create_writer(&out_ranks)?;
                report.write_ranks_csv(&mut w)?;
            }
            for (k, acc) in config.eval_ks.iter().zip(&report.accuracy) {
                println!("top-{k} accuracy: {acc:.4}");
            }
            if report.excluded > 0 {
                println!("excluded (retrieval failures): {}", report.excluded);
            }
        }
    }
    Ok(())
}

// Owned artifacts backing a retriever for one invocation.
struct RetrievalStack {
    sparse: Option<InvertedIndex>,
    dense: Option<DenseIndex>,
    model: Option<EncoderModel>,
    vocab: Option<Vocabulary>,
    fingerprint: Option<String>,
}

impl RetrievalStack {
    fn load(
        mode: &str,
        sparse_index: Option<&Path>,
        dense_index: Option<&Path>,
        checkpoint: Option<&Path>,
        vocab: Option<&Path>,
    ) -> Result<RetrievalStack> {
        let mut stack = RetrievalStack {
            sparse: None,
            dense: None,
            model: None,
            vocab: None,
            fingerprint: None,
        };
        if mode == "sparse" || mode == "hybrid" {
            let path = required_path(sparse_index, "sparse-index", mode)?;
            stack.sparse = Some(InvertedIndex::load(path)?.0);
        }
        if mode == "dense" || mode == "hybrid" {
            let index_path = required_path(dense_index, "dense-index", mode)?;
            let ckpt_path = required_path(checkpoint, "checkpoint", mode)?;
            let vocab_path = required_path(vocab, "vocab", mode)?;
            stack.dense = Some(DenseIndex::load(index_path)?.0);
            let (model, _, _) = train::load_checkpoint(ckpt_path)?;
            stack.model = Some(model);
            stack.vocab = Some(load_vocab(vocab_path)?);
            stack.fingerprint = Some(model_fingerprint(ckpt_path)?);
        }
        Ok(stack)
    }

    fn retriever<'a>(
        &'a self,
        mode: &str,
        tokenizer: &'a Tokenizer,
        config: &RunConfig,
        k: usize,
    ) -> Result<Box<dyn Retriever + 'a>> {
        match mode {
            "sparse" => Ok(Box::new(SparseRetriever {
                index: self.sparse.as_ref().expect("loaded for mode"),
                tokenizer,
            })),
            "dense" => Ok(Box::new(self.dense_retriever(tokenizer))),
            "hybrid" => {
                let hybrid_config = HybridConfig {
                    k_prime: config.k_prime,
                    alpha: config.alpha,
                    k,
                };
                hybrid_config.validate()?;
                Ok(Box::new(HybridRetriever {
                    dense: self.dense_retriever(tokenizer),
                    sparse: SparseRetriever {
                        index: self.sparse.as_ref().expect("loaded for mode"),
                        tokenizer,
                    },
                    config: hybrid_config,
                }))
            }
            other => Err(Error::InvalidConfig {
                msg: format!("unknown mode {other:?}"),
            }),
        }
    }

    fn dense_retriever<'a>(&'a self, tokenizer: &'a Tokenizer) -> DenseRetriever<'a> {
        DenseRetriever {
            model: self.model.as_ref().expect("loaded for mode"),
            vocab: self.vocab.as_ref().expect("loaded for mode"),
            index: self.dense.as_ref().expect("loaded for mode"),
            model_fingerprint: self.fingerprint.clone().expect("loaded for mode"),
            tokenizer,
        }
    }
}

fn required_path<'a>(path: Option<&'a Path>, flag: &str, mode: &str) -> Result<&'a Path> {
    path.ok_or_else(|| Error::InvalidConfig {
        msg: format!("--{flag} is required for mode {mode}"),
    })
}
