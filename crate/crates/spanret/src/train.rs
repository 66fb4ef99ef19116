//! Contrastive training: in-batch-negative cross-entropy, Adam with linear
//! warmup and decay, metrics logging and binary checkpoints.
//!
//! Gradients over a batch are accumulated in a fixed number of chunks that
//! are reduced in chunk order, so results are bit-identical no matter how
//! many worker threads run the chunks.

use crate::artifact::{self, Header, UpstreamRef};
use crate::corpus::{passage_text_with_title, Corpus};
use crate::encoder::{
    derive_seed, loss_from_scores, EncoderConfig, EncoderModel, ForwardCache, LossDiagnostics,
    ParamSet,
};
use crate::error::{Error, Result};
use crate::examples::PseudoExample;
use crate::tokenizer::{Tokenizer, Vocabulary};
use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const CHECKPOINT_KIND: &str = "checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Fixed gradient-reduction fan-in. Constant so the floating-point summation
/// order (and therefore every artifact hash) is independent of thread count.
const GRAD_CHUNKS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerHyper {
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl OptimizerHyper {
    /// Adam defaults with the given schedule.
    pub fn new(peak_lr: f64, warmup_fraction: f64, total_steps: u64) -> OptimizerHyper {
        OptimizerHyper {
            peak_lr,
            warmup_fraction,
            total_steps,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Linear warmup to `peak_lr` over the first `warmup_fraction` of steps,
/// then linear decay to zero at `total_steps`. `step` is 1-based.
pub fn learning_rate(hyper: &OptimizerHyper, step: u64) -> f64 {
    let total = hyper.total_steps as f64;
    let warmup = hyper.warmup_fraction * total;
    let t = step as f64;
    if warmup > 0.0 && t <= warmup {
        hyper.peak_lr * t / warmup
    } else if total > warmup {
        hyper.peak_lr * ((total - t).max(0.0) / (total - warmup))
    } else {
        0.0
    }
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub hyper: OptimizerHyper,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl OptimizerState {
    pub fn new(config: &EncoderConfig, hyper: OptimizerHyper) -> OptimizerState {
        OptimizerState {
            step: 0,
            hyper,
            m: ParamSet::zeros(config),
            v: ParamSet::zeros(config),
        }
    }

    /// One bias-corrected Adam step at the schedule's current learning rate.
    pub fn apply(&mut self, params: &mut ParamSet, grads: &ParamSet) {
        self.step += 1;
        let lr = learning_rate(&self.hyper, self.step);
        let b1 = self.hyper.beta1;
        let b2 = self.hyper.beta2;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let eps = self.hyper.eps;

        let mut p = params.tensors_mut();
        let g = grads.tensors();
        let mut m = self.m.tensors_mut();
        let mut v = self.v.tensors_mut();
        for i in 0..p.len() {
            let pd = &mut p[i].1;
            let gd = g[i].1;
            let md = &mut m[i].1;
            let vd = &mut v[i].1;
            for j in 0..pd.len() {
                md[j] = b1 * md[j] + (1.0 - b1) * gd[j];
                vd[j] = b2 * vd[j] + (1.0 - b2) * gd[j] * gd[j];
                let m_hat = md[j] / bc1;
                let v_hat = vd[j] / bc2;
                pd[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}

/// Aligned id sequences for one step: query i's positive is candidate i and,
/// when negatives are on, its sampled negative is candidate m+i.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub queries: Vec<Vec<u32>>,
    pub positives: Vec<Vec<u32>>,
    pub negatives: Option<Vec<Vec<u32>>>,
}

impl TrainBatch {
    pub fn validate(&self) -> Result<()> {
        let m = self.queries.len();
        let ok = self.positives.len() == m
            && self.negatives.as_ref().map_or(true, |n| n.len() == m)
            && m > 0;
        if !ok {
            return Err(Error::InvalidConfig {
                msg: "batch arrays must be non-empty and aligned".to_string(),
            });
        }
        Ok(())
    }

    fn sequences(&self) -> Vec<&[u32]> {
        let mut out: Vec<&[u32]> = Vec::new();
        out.extend(self.queries.iter().map(|s| s.as_slice()));
        out.extend(self.positives.iter().map(|s| s.as_slice()));
        if let Some(negs) = &self.negatives {
            out.extend(negs.iter().map(|s| s.as_slice()));
        }
        out
    }
}

fn chunk_ranges(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..GRAD_CHUNKS)
        .map(|c| (c * n / GRAD_CHUNKS)..((c + 1) * n / GRAD_CHUNKS))
        .collect()
}

fn encode_all(
    model: &EncoderModel,
    seqs: &[&[u32]],
    step_seed: Option<u64>,
) -> Vec<(Array1<f64>, ForwardCache)> {
    let ranges = chunk_ranges(seqs.len());
    let chunks: Vec<Vec<(Array1<f64>, ForwardCache)>> = ranges
        .into_par_iter()
        .map(|range| {
            range
                .map(|i| {
                    let seq_seed = step_seed.map(|s| derive_seed(s, 0x5E0 + i as u64));
                    model.forward(seqs[i], seq_seed)
                })
                .collect()
        })
        .collect();
    chunks.into_iter().flatten().collect()
}

fn score_matrix(
    queries: &[(Array1<f64>, ForwardCache)],
    candidates: &[(Array1<f64>, ForwardCache)],
) -> Array2<f64> {
    let m = queries.len();
    let c = candidates.len();
    let mut scores = Array2::zeros((m, c));
    for (i, (q, _)) in queries.iter().enumerate() {
        for (j, (p, _)) in candidates.iter().enumerate() {
            scores[(i, j)] = q.dot(p);
        }
    }
    scores
}

/// Mean in-batch cross-entropy of the batch. Query i's positive competes
/// against all positives (and negatives, when present) in the batch.
pub fn batch_loss(
    model: &EncoderModel,
    batch: &TrainBatch,
    step_seed: Option<u64>,
) -> Result<LossDiagnostics> {
    batch.validate()?;
    let seqs = batch.sequences();
    let encoded = encode_all(model, &seqs, step_seed);
    let m = batch.queries.len();
    let (queries, candidates) = encoded.split_at(m);
    let scores = score_matrix(queries, candidates);
    let targets: Vec<usize> = (0..m).collect();
    let (loss, _, ranks) = loss_from_scores(&scores, &targets)?;
    let top1 = ranks.iter().filter(|&&r| r == 1).count() as f64 / m as f64;
    Ok(LossDiagnostics {
        loss,
        ranks,
        top1_accuracy: top1,
    })
}

/// Loss plus exact gradients of the mean batch loss w.r.t. every parameter.
pub fn batch_backward(
    model: &EncoderModel,
    batch: &TrainBatch,
    step_seed: Option<u64>,
) -> Result<(LossDiagnostics, ParamSet)> {
    batch.validate()?;
    let seqs = batch.sequences();
    let encoded = encode_all(model, &seqs, step_seed);
    let m = batch.queries.len();
    let (queries, candidates) = encoded.split_at(m);
    let scores = score_matrix(queries, candidates);
    let targets: Vec<usize> = (0..m).collect();
    let (loss, probs, ranks) = loss_from_scores(&scores, &targets)?;
    let top1 = ranks.iter().filter(|&&r| r == 1).count() as f64 / m as f64;

    // d(loss)/d(score_ij) = (softmax_ij - [j == i]) / m
    let mut d_scores = probs;
    for i in 0..m {
        d_scores[(i, i)] -= 1.0;
    }
    d_scores.mapv_inplace(|v| v / m as f64);

    // d_cls per sequence: queries get rows of dS * P, candidates get rows of
    // dS^T * Q
    let mut d_cls: Vec<Array1<f64>> = Vec::with_capacity(encoded.len());
    for i in 0..m {
        let mut acc = Array1::zeros(model.config.embed_dim);
        for (j, (p, _)) in candidates.iter().enumerate() {
            acc.scaled_add(d_scores[(i, j)], p);
        }
        d_cls.push(acc);
    }
    for (j, _) in candidates.iter().enumerate() {
        let mut acc = Array1::zeros(model.config.embed_dim);
        for (i, (q, _)) in queries.iter().enumerate() {
            acc.scaled_add(d_scores[(i, j)], q);
        }
        d_cls.push(acc);
    }

    let ranges = chunk_ranges(encoded.len());
    let chunk_grads: Vec<ParamSet> = ranges
        .into_par_iter()
        .map(|range| {
            let mut grads = ParamSet::zeros(&model.config);
            for i in range {
                model.backward(&encoded[i].1, &d_cls[i], &mut grads);
            }
            grads
        })
        .collect();
    let mut grads = ParamSet::zeros(&model.config);
    for chunk in &chunk_grads {
        grads.add_assign(chunk);
    }

    Ok((
        LossDiagnostics {
            loss,
            ranks,
            top1_accuracy: top1,
        },
        grads,
    ))
}

/// Pseudo-examples converted to id sequences once, before the training loop.
#[derive(Debug, Clone)]
pub struct PreparedExamples {
    pub queries: Vec<Vec<u32>>,
    pub positives: Vec<Vec<u32>>,
    pub negatives: Vec<Option<Vec<u32>>>,
    pub unk_substitutions: u64,
    pub truncated: u64,
}

impl PreparedExamples {
    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

pub fn prepare_examples(
    model: &EncoderModel,
    vocab: &Vocabulary,
    corpus: &Corpus,
    tokenizer: &Tokenizer,
    examples: &[PseudoExample],
    use_negatives: bool,
) -> Result<PreparedExamples> {
    let mut out = PreparedExamples {
        queries: Vec::with_capacity(examples.len()),
        positives: Vec::with_capacity(examples.len()),
        negatives: Vec::with_capacity(examples.len()),
        unk_substitutions: 0,
        truncated: 0,
    };
    for ex in examples {
        let q_tokens: Vec<_> = ex.query.iter().map(|s| tokenizer.classify(s.clone())).collect();
        let (q_ids, unk, trunc) = model.prepare_ids(vocab, &q_tokens);
        out.unk_substitutions += unk as u64;
        out.truncated += trunc.min(1) as u64;

        let positive = corpus
            .by_id(&ex.positive_id)
            .ok_or_else(|| Error::UnknownPassage {
                id: ex.positive_id.clone(),
            })?;
        let (p_ids, unk, trunc) =
            model.prepare_ids(vocab, &passage_text_with_title(positive, tokenizer));
        out.unk_substitutions += unk as u64;
        out.truncated += trunc.min(1) as u64;

        let n_ids = if use_negatives {
            let neg_id = ex.negative_id.as_ref().ok_or_else(|| Error::InvalidConfig {
                msg: "training with negatives requires examples generated with negatives"
                    .to_string(),
            })?;
            let negative = corpus.by_id(neg_id).ok_or_else(|| Error::UnknownPassage {
                id: neg_id.clone(),
            })?;
            let (ids, unk, trunc) =
                model.prepare_ids(vocab, &passage_text_with_title(negative, tokenizer));
            out.unk_substitutions += unk as u64;
            out.truncated += trunc.min(1) as u64;
            Some(ids)
        } else {
            None
        };

        out.queries.push(q_ids);
        out.positives.push(p_ids);
        out.negatives.push(n_ids);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub peak_lr: f64,
    pub warmup_fraction: f64,
    pub use_negatives: bool,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            total_steps: 1000,
            seed: 0,
            peak_lr: 2e-5,
            warmup_fraction: 0.01,
            use_negatives: true,
            log_every: 50,
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub top1: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: Vec<MetricsRow>,
}

/// Where and how to persist checkpoints during training.
#[derive(Debug, Clone)]
pub struct CheckpointSpec {
    pub path: PathBuf,
    pub config: serde_json::Value,
    pub upstream: BTreeMap<String, UpstreamRef>,
}

pub fn write_metrics_csv<W: std::io::Write>(w: &mut W, metrics: &[MetricsRow]) -> Result<()> {
    writeln!(w, "step,lr,loss,top1").map_err(|e| Error::io("<metrics>", e))?;
    for row in metrics {
        writeln!(w, "{},{},{},{}", row.step, row.lr, row.loss, row.top1)
            .map_err(|e| Error::io("<metrics>", e))?;
    }
    Ok(())
}

/// Run the training loop. The example stream is cycled with a reshuffle per
/// epoch; the whole run replays exactly from `config.seed`.
pub fn train(
    model: &mut EncoderModel,
    opt: &mut OptimizerState,
    prepared: &PreparedExamples,
    config: &TrainConfig,
    checkpoint: Option<&CheckpointSpec>,
) -> Result<TrainOutcome> {
    let n = prepared.len();
    let m = config.batch_size;
    if m == 0 || n < m {
        return Err(Error::InvalidConfig {
            msg: format!("need at least batch_size={m} examples, have {n}"),
        });
    }
    let batches_per_epoch = n / m;
    let mut order: Vec<usize> = (0..n).collect();
    let mut metrics = Vec::new();
    let mut last_checkpoint: Option<String> = None;

    for step in 1..=config.total_steps {
        let batch_in_epoch = ((step - 1) % batches_per_epoch as u64) as usize;
        if batch_in_epoch == 0 {
            let epoch = (step - 1) / batches_per_epoch as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, 0xE90C + epoch));
            order.shuffle(&mut rng);
        }
        let idx = &order[batch_in_epoch * m..(batch_in_epoch + 1) * m];
        let batch = TrainBatch {
            queries: idx.iter().map(|&i| prepared.queries[i].clone()).collect(),
            positives: idx.iter().map(|&i| prepared.positives[i].clone()).collect(),
            negatives: if config.use_negatives {
                Some(
                    idx.iter()
                        .map(|&i| prepared.negatives[i].clone().expect("validated negatives"))
                        .collect(),
                )
            } else {
                None
            },
        };

        let step_seed = derive_seed(config.seed, 0xD80 + step);
        let (diag, grads) = batch_backward(model, &batch, Some(step_seed))?;
        if !diag.loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                checkpoint: last_checkpoint,
            });
        }
        opt.apply(&mut model.params, &grads);
        if !model.params.all_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                checkpoint: last_checkpoint,
            });
        }

        if step == 1 || step % config.log_every == 0 || step == config.total_steps {
            metrics.push(MetricsRow {
                step,
                lr: learning_rate(&opt.hyper, step),
                loss: diag.loss,
                top1: diag.top1_accuracy,
            });
        }
        if let Some(spec) = checkpoint {
            if step % config.checkpoint_every == 0 || step == config.total_steps {
                save_checkpoint(&spec.path, model, opt, &spec.config, spec.upstream.clone())?;
                last_checkpoint = Some(spec.path.display().to_string());
            }
        }
    }
    Ok(TrainOutcome { metrics })
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeaderConfig {
    encoder: EncoderConfig,
    optimizer: OptimizerHyper,
    step: u64,
    run: serde_json::Value,
}

fn write_param_set<W: std::io::Write>(
    w: &mut artifact::BinWriter<W>,
    set: &ParamSet,
) -> Result<()> {
    let tensors = set.tensors();
    w.write_u32(tensors.len() as u32)?;
    for (name, data, shape) in tensors {
        w.write_str(&name)?;
        w.write_u32(shape.len() as u32)?;
        for dim in &shape {
            w.write_u64(*dim as u64)?;
        }
        w.write_f64_slice(data)?;
    }
    Ok(())
}

fn read_param_set<R: std::io::Read>(
    r: &mut artifact::BinReader<R>,
    set: &mut ParamSet,
) -> Result<()> {
    let count = r.read_u32()? as usize;
    let mut tensors = set.tensors_mut();
    if count != tensors.len() {
        return Err(Error::BadArtifact {
            expected: CHECKPOINT_KIND.to_string(),
            msg: format!("tensor count {count} != expected {}", tensors.len()),
        });
    }
    for (name, data) in tensors.iter_mut() {
        let found = r.read_str()?;
        if &found != name {
            return Err(Error::BadArtifact {
                expected: CHECKPOINT_KIND.to_string(),
                msg: format!("tensor order mismatch: found {found}, expected {name}"),
            });
        }
        let ndims = r.read_u32()? as usize;
        let mut numel = 1usize;
        for _ in 0..ndims {
            numel *= r.read_u64()? as usize;
        }
        if numel != data.len() {
            return Err(Error::BadArtifact {
                expected: CHECKPOINT_KIND.to_string(),
                msg: format!("tensor {name} has {numel} elements, expected {}", data.len()),
            });
        }
        let values = r.read_f64_vec()?;
        data.copy_from_slice(&values);
    }
    Ok(())
}

/// Versioned binary checkpoint: config header, parameter tensors in declared
/// order, then the optimizer state.
pub fn save_checkpoint(
    path: &Path,
    model: &EncoderModel,
    opt: &OptimizerState,
    run_config: &serde_json::Value,
    upstream: BTreeMap<String, UpstreamRef>,
) -> Result<()> {
    let header_config = CheckpointHeaderConfig {
        encoder: model.config.clone(),
        optimizer: opt.hyper,
        step: opt.step,
        run: run_config.clone(),
    };
    let header = Header::new(CHECKPOINT_KIND, CHECKPOINT_VERSION, &header_config, upstream);
    let tmp = path.with_extension("tmp");
    {
        let writer = artifact::create_writer(&tmp)?;
        let mut w = artifact::BinWriter::new(writer, &header)?;
        write_param_set(&mut w, &model.params)?;
        w.write_u64(opt.step)?;
        write_param_set(&mut w, &opt.m)?;
        write_param_set(&mut w, &opt.v)?;
        w.finish()?;
    }
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderModel, OptimizerState, Header)> {
    let reader = artifact::open_reader(path)?;
    let mut r = artifact::BinReader::new(reader, CHECKPOINT_KIND, CHECKPOINT_VERSION)?;
    let header_config: CheckpointHeaderConfig = serde_json::from_value(r.header.config.clone())
        .map_err(|e| Error::BadArtifact {
            expected: CHECKPOINT_KIND.to_string(),
            msg: format!("bad checkpoint header: {e}"),
        })?;
    header_config.encoder.validate()?;
    let mut params = ParamSet::zeros(&header_config.encoder);
    read_param_set(&mut r, &mut params)?;
    let step = r.read_u64()?;
    let mut opt = OptimizerState::new(&header_config.encoder, header_config.optimizer);
    opt.step = step;
    read_param_set(&mut r, &mut opt.m)?;
    read_param_set(&mut r, &mut opt.v)?;
    let header = r.header.clone();
    Ok((
        EncoderModel {
            config: header_config.encoder,
            params,
        },
        opt,
        header,
    ))
}

/// The fingerprint a dense index records to pin the model that built it.
pub fn model_fingerprint(path: &Path) -> Result<String> {
    artifact::file_sha256(path)
}
