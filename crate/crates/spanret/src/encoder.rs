//! Shared-weight transformer dual encoder with hand-written backprop.
//!
//! Sequences are encoded independently (no cross-sequence padding): each
//! forward pass works on one `<cls>`-prefixed id sequence and returns the
//! final-layer hidden state at the `<cls>` position. The contrastive batch
//! loss couples sequences only through the query-candidate score matrix, so
//! batch items parallelize with a fixed-order gradient reduction.
//!
//! Blocks are post-norm: `x = LN(x + Attn(x))`, `x = LN(x + FFN(x))`, GELU
//! activation, inverted dropout on embeddings, attention probabilities,
//! attention output and FFN output. Dropout masks come from a counter-based
//! RNG keyed by (seed, sequence, layer, site) so any run replays exactly.

use crate::error::{Error, Result};
use crate::tokenizer::{Token, Vocabulary, CLS_ID};
use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidConfig {
                msg: format!(
                    "embed_dim {} must be a positive multiple of heads {}",
                    self.embed_dim, self.heads
                ),
            });
        }
        if self.vocab_size == 0 || self.layers == 0 || self.ff_dim == 0 || self.max_seq_len < 2 {
            return Err(Error::InvalidConfig {
                msg: "vocab_size, layers, ff_dim must be positive; max_seq_len >= 2".to_string(),
            });
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig {
                msg: format!("dropout {} must be in [0, 1)", self.dropout),
            });
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerTensors {
    pub wq: Array2<f64>,
    pub bq: Array1<f64>,
    pub wk: Array2<f64>,
    pub bk: Array1<f64>,
    pub wv: Array2<f64>,
    pub bv: Array1<f64>,
    pub wo: Array2<f64>,
    pub bo: Array1<f64>,
    pub ln1_gamma: Array1<f64>,
    pub ln1_beta: Array1<f64>,
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub ln2_gamma: Array1<f64>,
    pub ln2_beta: Array1<f64>,
}

/// All trainable tensors. The same shape serves as model parameters,
/// gradients, and Adam moment accumulators.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub token_emb: Array2<f64>,
    pub pos_emb: Array2<f64>,
    pub layers: Vec<LayerTensors>,
}

impl ParamSet {
    pub fn zeros(config: &EncoderConfig) -> ParamSet {
        let d = config.embed_dim;
        let ff = config.ff_dim;
        ParamSet {
            token_emb: Array2::zeros((config.vocab_size, d)),
            pos_emb: Array2::zeros((config.max_seq_len, d)),
            layers: (0..config.layers)
                .map(|_| LayerTensors {
                    wq: Array2::zeros((d, d)),
                    bq: Array1::zeros(d),
                    wk: Array2::zeros((d, d)),
                    bk: Array1::zeros(d),
                    wv: Array2::zeros((d, d)),
                    bv: Array1::zeros(d),
                    wo: Array2::zeros((d, d)),
                    bo: Array1::zeros(d),
                    ln1_gamma: Array1::zeros(d),
                    ln1_beta: Array1::zeros(d),
                    w1: Array2::zeros((d, ff)),
                    b1: Array1::zeros(ff),
                    w2: Array2::zeros((ff, d)),
                    b2: Array1::zeros(d),
                    ln2_gamma: Array1::zeros(d),
                    ln2_beta: Array1::zeros(d),
                })
                .collect(),
        }
    }

    /// Tensors in declared order: the canonical enumeration used by the
    /// checkpoint layout, the optimizer and the gradient checks.
    pub fn tensors(&self) -> Vec<(String, &[f64], Vec<usize>)> {
        let mut out: Vec<(String, &[f64], Vec<usize>)> = vec![
            (
                "token_emb".to_string(),
                self.token_emb.as_slice().unwrap(),
                self.token_emb.shape().to_vec(),
            ),
            (
                "pos_emb".to_string(),
                self.pos_emb.as_slice().unwrap(),
                self.pos_emb.shape().to_vec(),
            ),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            let m2: [(&str, &Array2<f64>); 6] = [
                ("wq", &layer.wq),
                ("wk", &layer.wk),
                ("wv", &layer.wv),
                ("wo", &layer.wo),
                ("w1", &layer.w1),
                ("w2", &layer.w2),
            ];
            let v1: [(&str, &Array1<f64>); 10] = [
                ("bq", &layer.bq),
                ("bk", &layer.bk),
                ("bv", &layer.bv),
                ("bo", &layer.bo),
                ("ln1_gamma", &layer.ln1_gamma),
                ("ln1_beta", &layer.ln1_beta),
                ("b1", &layer.b1),
                ("b2", &layer.b2),
                ("ln2_gamma", &layer.ln2_gamma),
                ("ln2_beta", &layer.ln2_beta),
            ];
            // declared order: wq,bq,wk,bk,wv,bv,wo,bo,ln1,ff,ln2
            let order = [
                "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln1_gamma", "ln1_beta", "w1",
                "b1", "w2", "b2", "ln2_gamma", "ln2_beta",
            ];
            for name in order {
                if let Some((_, a)) = m2.iter().find(|(n, _)| *n == name) {
                    out.push((format!("layer{l}.{name}"), a.as_slice().unwrap(), a.shape().to_vec()));
                } else if let Some((_, a)) = v1.iter().find(|(n, _)| *n == name) {
                    out.push((format!("layer{l}.{name}"), a.as_slice().unwrap(), a.shape().to_vec()));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("token_emb".to_string(), self.token_emb.as_slice_mut().unwrap()),
            ("pos_emb".to_string(), self.pos_emb.as_slice_mut().unwrap()),
        ];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{l}.wq"), layer.wq.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.bq"), layer.bq.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.wk"), layer.wk.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.bk"), layer.bk.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.wv"), layer.wv.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.bv"), layer.bv.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.wo"), layer.wo.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.bo"), layer.bo.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ln1_gamma"), layer.ln1_gamma.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ln1_beta"), layer.ln1_beta.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.w1"), layer.w1.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.b1"), layer.b1.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.w2"), layer.w2.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.b2"), layer.b2.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ln2_gamma"), layer.ln2_gamma.as_slice_mut().unwrap()));
            out.push((format!("layer{l}.ln2_beta"), layer.ln2_beta.as_slice_mut().unwrap()));
        }
        out
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        self.token_emb += &other.token_emb;
        self.pos_emb += &other.pos_emb;
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.wq += &b.wq;
            a.bq += &b.bq;
            a.wk += &b.wk;
            a.bk += &b.bk;
            a.wv += &b.wv;
            a.bv += &b.bv;
            a.wo += &b.wo;
            a.bo += &b.bo;
            a.ln1_gamma += &b.ln1_gamma;
            a.ln1_beta += &b.ln1_beta;
            a.w1 += &b.w1;
            a.b1 += &b.b1;
            a.w2 += &b.w2;
            a.b2 += &b.b2;
            a.ln2_gamma += &b.ln2_gamma;
            a.ln2_beta += &b.ln2_beta;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, data, _)| data.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

/// Stable 64-bit mixer for deriving seeds; splitmix64 finalizer.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn normal_sample(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; rejection of u1=0 keeps ln finite
    loop {
        let u1: f64 = rng.gen();
        if u1 > 0.0 {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        }
    }
}

impl EncoderModel {
    /// Random initialization: weights N(0, 0.02), biases zero, LayerNorm
    /// gains one. Deterministic in `seed`.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<EncoderModel> {
        config.validate()?;
        let mut params = ParamSet::zeros(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x1417));
        for (name, data) in params.tensors_mut() {
            if name.ends_with("gamma") {
                data.fill(1.0);
            } else if name.contains(".b") && !name.contains("beta") || name.ends_with("beta") {
                // biases and LN shifts start at zero
            } else {
                for v in data.iter_mut() {
                    *v = normal_sample(&mut rng) * INIT_STD;
                }
            }
        }
        Ok(EncoderModel { config, params })
    }

    pub fn head_dim(&self) -> usize {
        self.config.embed_dim / self.config.heads
    }

    /// Map tokens to a `<cls>`-prefixed id sequence, truncating to
    /// `max_seq_len`. Returns (ids, unknown substitutions, truncated count).
    pub fn prepare_ids(&self, vocab: &Vocabulary, tokens: &[Token]) -> (Vec<u32>, usize, usize) {
        let budget = self.config.max_seq_len - 1;
        let truncated = tokens.len().saturating_sub(budget);
        let (mut ids, unk) = vocab.encode(&tokens[..tokens.len() - truncated]);
        ids.insert(0, CLS_ID);
        (ids, unk, truncated)
    }

    /// Encode a token sequence to a d-dimensional vector. `dropout_seed` is
    /// Some only in train mode.
    pub fn encode(
        &self,
        vocab: &Vocabulary,
        tokens: &[Token],
        dropout_seed: Option<u64>,
    ) -> Array1<f64> {
        let (ids, _, _) = self.prepare_ids(vocab, tokens);
        let (vec, _) = self.forward(&ids, dropout_seed);
        vec
    }

    /// Forward pass over one id sequence; returns the `<cls>` vector and the
    /// cache needed for the backward pass.
    pub fn forward(&self, ids: &[u32], dropout_seed: Option<u64>) -> (Array1<f64>, ForwardCache) {
        let t_len = ids.len();
        assert!(t_len >= 1 && t_len <= self.config.max_seq_len, "bad sequence length {t_len}");
        let d = self.config.embed_dim;
        let p = self.config.dropout;

        let mut x = Array2::zeros((t_len, d));
        for (t, &id) in ids.iter().enumerate() {
            let id = (id as usize).min(self.config.vocab_size - 1);
            let row = &self.params.token_emb.row(id) + &self.params.pos_emb.row(t);
            x.row_mut(t).assign(&row);
        }
        let emb_mask = make_dropout_mask(dropout_seed, 0, x.dim(), p);
        apply_dropout(&mut x, emb_mask.as_ref(), p);

        let mut cache = ForwardCache {
            ids: ids.to_vec(),
            emb_mask,
            layers: Vec::with_capacity(self.config.layers),
            dropout_seed,
        };

        for (l, layer) in self.params.layers.iter().enumerate() {
            let (out, lc) = self.layer_forward(layer, l, &x, dropout_seed, p);
            cache.layers.push(lc);
            x = out;
        }
        (x.row(0).to_owned(), cache)
    }

    fn layer_forward(
        &self,
        layer: &LayerTensors,
        l: usize,
        x_in: &Array2<f64>,
        dropout_seed: Option<u64>,
        p: f64,
    ) -> (Array2<f64>, LayerCache) {
        let t_len = x_in.nrows();
        let heads = self.config.heads;
        let dh = self.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let q = x_in.dot(&layer.wq) + &layer.bq;
        let k = x_in.dot(&layer.wk) + &layer.bk;
        let v = x_in.dot(&layer.wv) + &layer.bv;

        let probs_site = 1 + l as u64 * 3;
        let probs_mask = make_dropout_mask(dropout_seed, probs_site, (heads * t_len, t_len), p);
        let mut probs: Vec<Array2<f64>> = Vec::with_capacity(heads);
        let mut ctx = Array2::zeros((t_len, heads * dh));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let qh = q.slice(cols);
            let kh = k.slice(cols);
            let vh = v.slice(cols);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|s| s * scale);
            let prob = softmax_rows(&scores);
            let mut dropped = prob.clone();
            if let Some(mask) = &probs_mask {
                let mh = mask.slice(s![h * t_len..(h + 1) * t_len, ..]);
                dropped.zip_mut_with(&mh.to_owned(), |v, &m| *v = *v * m / (1.0 - p));
            }
            ctx.slice_mut(cols).assign(&dropped.dot(&vh));
            probs.push(prob);
        }

        let mut attn = ctx.dot(&layer.wo) + &layer.bo;
        let attn_mask = make_dropout_mask(dropout_seed, probs_site + 1, attn.dim(), p);
        apply_dropout(&mut attn, attn_mask.as_ref(), p);

        let sum1 = x_in + &attn;
        let (x1, ln1) = layer_norm(&sum1, &layer.ln1_gamma, &layer.ln1_beta);

        let h_pre = x1.dot(&layer.w1) + &layer.b1;
        let h_act = h_pre.mapv(gelu);
        let mut ffn = h_act.dot(&layer.w2) + &layer.b2;
        let ffn_mask = make_dropout_mask(dropout_seed, probs_site + 2, ffn.dim(), p);
        apply_dropout(&mut ffn, ffn_mask.as_ref(), p);

        let sum2 = &x1 + &ffn;
        let (x2, ln2) = layer_norm(&sum2, &layer.ln2_gamma, &layer.ln2_beta);

        let lc = LayerCache {
            x_in: x_in.clone(),
            q,
            k,
            v,
            probs,
            probs_mask,
            ctx,
            attn_mask,
            ln1,
            x1,
            h_pre,
            h_act,
            ffn_mask,
            ln2,
        };
        (x2, lc)
    }

    /// Backward pass for one sequence: gradient of `loss` w.r.t. every
    /// parameter given d(loss)/d(cls vector). Accumulates into `grads`.
    pub fn backward(&self, cache: &ForwardCache, d_cls: &Array1<f64>, grads: &mut ParamSet) {
        let t_len = cache.ids.len();
        let d = self.config.embed_dim;
        let p = self.config.dropout;
        let mut d_out = Array2::zeros((t_len, d));
        d_out.row_mut(0).assign(d_cls);

        for (l, layer) in self.params.layers.iter().enumerate().rev() {
            d_out = self.layer_backward(layer, &cache.layers[l], d_out, &mut grads.layers[l], p);
        }

        // embedding dropout, then scatter to token and position rows
        if let Some(mask) = &cache.emb_mask {
            d_out.zip_mut_with(mask, |v, &m| *v = *v * m / (1.0 - p));
        }
        for (t, &id) in cache.ids.iter().enumerate() {
            let id = (id as usize).min(self.config.vocab_size - 1);
            let row = d_out.row(t);
            grads.token_emb.row_mut(id).zip_mut_with(&row, |g, &v| *g += v);
            grads.pos_emb.row_mut(t).zip_mut_with(&row, |g, &v| *g += v);
        }
    }

    fn layer_backward(
        &self,
        layer: &LayerTensors,
        lc: &LayerCache,
        d_out: Array2<f64>,
        grads: &mut LayerTensors,
        p: f64,
    ) -> Array2<f64> {
        let heads = self.config.heads;
        let dh = self.head_dim();
        let t_len = lc.x_in.nrows();
        let scale = 1.0 / (dh as f64).sqrt();

        // LN2
        let (d_sum2, dg2, db2) = layer_norm_backward(&d_out, &lc.ln2, &layer.ln2_gamma);
        grads.ln2_gamma += &dg2;
        grads.ln2_beta += &db2;

        // FFN branch
        let mut d_ffn = d_sum2.clone();
        if let Some(mask) = &lc.ffn_mask {
            d_ffn.zip_mut_with(mask, |v, &m| *v = *v * m / (1.0 - p));
        }
        grads.b2 += &d_ffn.sum_axis(Axis(0));
        grads.w2 += &lc.h_act.t().dot(&d_ffn);
        let mut d_h = d_ffn.dot(&layer.w2.t());
        d_h.zip_mut_with(&lc.h_pre, |g, &x| *g *= gelu_grad(x));
        grads.b1 += &d_h.sum_axis(Axis(0));
        grads.w1 += &lc.x1.t().dot(&d_h);
        let mut d_x1 = d_h.dot(&layer.w1.t());
        d_x1 += &d_sum2; // residual

        // LN1
        let (d_sum1, dg1, db1) = layer_norm_backward(&d_x1, &lc.ln1, &layer.ln1_gamma);
        grads.ln1_gamma += &dg1;
        grads.ln1_beta += &db1;

        // attention output projection
        let mut d_attn = d_sum1.clone();
        if let Some(mask) = &lc.attn_mask {
            d_attn.zip_mut_with(mask, |v, &m| *v = *v * m / (1.0 - p));
        }
        grads.bo += &d_attn.sum_axis(Axis(0));
        grads.wo += &lc.ctx.t().dot(&d_attn);
        let d_ctx = d_attn.dot(&layer.wo.t());

        // per-head attention backward
        let mut d_q = Array2::zeros((t_len, heads * dh));
        let mut d_k = Array2::zeros((t_len, heads * dh));
        let mut d_v = Array2::zeros((t_len, heads * dh));
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let d_ch = d_ctx.slice(cols);
            let vh = lc.v.slice(cols);
            let prob = &lc.probs[h];

            // reconstruct dropped probabilities for the V-path gradient
            let mut dropped = prob.clone();
            if let Some(mask) = &lc.probs_mask {
                let mh = mask.slice(s![h * t_len..(h + 1) * t_len, ..]);
                dropped.zip_mut_with(&mh.to_owned(), |v, &m| *v = *v * m / (1.0 - p));
            }
            d_v.slice_mut(cols).assign(&dropped.t().dot(&d_ch));

            let mut d_prob = d_ch.dot(&vh.t());
            if let Some(mask) = &lc.probs_mask {
                let mh = mask.slice(s![h * t_len..(h + 1) * t_len, ..]);
                d_prob.zip_mut_with(&mh.to_owned(), |v, &m| *v = *v * m / (1.0 - p));
            }
            // softmax rows backward
            let inner = (&d_prob * prob).sum_axis(Axis(1));
            let mut d_scores = d_prob;
            for (mut row, (&i, prow)) in d_scores
                .axis_iter_mut(Axis(0))
                .zip(inner.iter().zip(prob.axis_iter(Axis(0))))
            {
                for (ds, &pv) in row.iter_mut().zip(prow.iter()) {
                    *ds = pv * (*ds - i);
                }
            }
            d_scores.mapv_inplace(|v| v * scale);

            let qh = lc.q.slice(cols);
            let kh = lc.k.slice(cols);
            d_q.slice_mut(cols).assign(&d_scores.dot(&kh));
            d_k.slice_mut(cols).assign(&d_scores.t().dot(&qh));
        }

        // input projections
        let mut d_x_in = d_sum1; // residual path
        grads.bq += &d_q.sum_axis(Axis(0));
        grads.wq += &lc.x_in.t().dot(&d_q);
        d_x_in += &d_q.dot(&layer.wq.t());
        grads.bk += &d_k.sum_axis(Axis(0));
        grads.wk += &lc.x_in.t().dot(&d_k);
        d_x_in += &d_k.dot(&layer.wk.t());
        grads.bv += &d_v.sum_axis(Axis(0));
        grads.wv += &lc.x_in.t().dot(&d_v);
        d_x_in += &d_v.dot(&layer.wv.t());
        d_x_in
    }
}

/// Inner-product relevance score.
pub fn score(q_vec: &Array1<f64>, p_vec: &Array1<f64>) -> Result<f64> {
    if q_vec.len() != p_vec.len() {
        return Err(Error::DimensionMismatch {
            msg: format!("{} vs {}", q_vec.len(), p_vec.len()),
        });
    }
    Ok(q_vec.dot(p_vec))
}

pub struct ForwardCache {
    pub ids: Vec<u32>,
    emb_mask: Option<Array2<f64>>,
    layers: Vec<LayerCache>,
    #[allow(dead_code)]
    dropout_seed: Option<u64>,
}

struct LayerCache {
    x_in: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    probs_mask: Option<Array2<f64>>,
    ctx: Array2<f64>,
    attn_mask: Option<Array2<f64>>,
    ln1: LnCache,
    x1: Array2<f64>,
    h_pre: Array2<f64>,
    h_act: Array2<f64>,
    ffn_mask: Option<Array2<f64>>,
    ln2: LnCache,
}

struct LnCache {
    x_hat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gamma: &Array1<f64>, beta: &Array1<f64>) -> (Array2<f64>, LnCache) {
    let n = x.ncols() as f64;
    let mut x_hat = Array2::zeros(x.dim());
    let mut inv_std = Array1::zeros(x.nrows());
    let mut out = Array2::zeros(x.dim());
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let istd = 1.0 / (var + LN_EPS).sqrt();
        inv_std[i] = istd;
        for (j, &v) in row.iter().enumerate() {
            let xh = (v - mean) * istd;
            x_hat[(i, j)] = xh;
            out[(i, j)] = gamma[j] * xh + beta[j];
        }
    }
    (out, LnCache { x_hat, inv_std })
}

fn layer_norm_backward(
    d_out: &Array2<f64>,
    cache: &LnCache,
    gamma: &Array1<f64>,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let n = d_out.ncols() as f64;
    let d_gamma = (d_out * &cache.x_hat).sum_axis(Axis(0));
    let d_beta = d_out.sum_axis(Axis(0));
    let mut d_x = Array2::zeros(d_out.dim());
    for i in 0..d_out.nrows() {
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d_out.ncols() {
            let dxh = d_out[(i, j)] * gamma[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * cache.x_hat[(i, j)];
        }
        mean_dxhat /= n;
        mean_dxhat_xhat /= n;
        for j in 0..d_out.ncols() {
            let dxh = d_out[(i, j)] * gamma[j];
            d_x[(i, j)] =
                cache.inv_std[i] * (dxh - mean_dxhat - cache.x_hat[(i, j)] * mean_dxhat_xhat);
        }
    }
    (d_x, d_gamma, d_beta)
}

fn softmax_rows(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(scores.dim());
    for (i, row) in scores.axis_iter(Axis(0)).enumerate() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &v) in row.iter().enumerate() {
            let e = (v - max).exp();
            out[(i, j)] = e;
            sum += e;
        }
        for j in 0..row.len() {
            out[(i, j)] /= sum;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn make_dropout_mask(
    dropout_seed: Option<u64>,
    site: u64,
    dim: (usize, usize),
    p: f64,
) -> Option<Array2<f64>> {
    let seed = dropout_seed?;
    if p == 0.0 {
        return None;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xD0 + site));
    let mut mask = Array2::zeros(dim);
    for v in mask.iter_mut() {
        *v = if rng.gen::<f64>() >= p { 1.0 } else { 0.0 };
    }
    Some(mask)
}

fn apply_dropout(x: &mut Array2<f64>, mask: Option<&Array2<f64>>, p: f64) {
    if let Some(mask) = mask {
        x.zip_mut_with(mask, |v, &m| *v = *v * m / (1.0 - p));
    }
}

/// Per-query diagnostics for a contrastive batch.
#[derive(Debug, Clone)]
pub struct LossDiagnostics {
    pub loss: f64,
    /// 1-based rank of the positive among the candidates, per query.
    pub ranks: Vec<usize>,
    pub top1_accuracy: f64,
}

/// Softmax cross-entropy over a score matrix with log-sum-exp
/// stabilization. `targets[i]` is the column of query i's positive.
/// Returns the mean loss, the softmax probabilities (needed for gradients)
/// and the positive ranks.
pub fn loss_from_scores(
    scores: &Array2<f64>,
    targets: &[usize],
) -> Result<(f64, Array2<f64>, Vec<usize>)> {
    let m = scores.nrows();
    assert_eq!(targets.len(), m);
    let mut probs = Array2::zeros(scores.dim());
    let mut total = 0.0;
    let mut ranks = Vec::with_capacity(m);
    for (i, row) in scores.axis_iter(Axis(0)).enumerate() {
        if row.iter().any(|v| v.is_nan()) {
            return Err(Error::NanScore { index: i });
        }
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for &v in row.iter() {
            sum += (v - max).exp();
        }
        let log_z = max + sum.ln();
        total += log_z - row[targets[i]];
        for (j, &v) in row.iter().enumerate() {
            probs[(i, j)] = (v - max).exp() / sum;
        }
        let target_score = row[targets[i]];
        let rank = 1 + row.iter().filter(|&&v| v > target_score).count();
        ranks.push(rank);
    }
    Ok((total / m as f64, probs, ranks))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::Tokenizer;
    use std::collections::BTreeMap;

    fn tiny_config() -> EncoderConfig {
        EncoderConfig {
            vocab_size: 12,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            ff_dim: 16,
            max_seq_len: 10,
            dropout: 0.1,
        }
    }

    fn tiny_vocab() -> Vocabulary {
        let counts = BTreeMap::from([
            ("alpha".to_string(), 5u64),
            ("beta".to_string(), 4),
            ("gamma".to_string(), 3),
            ("delta".to_string(), 2),
        ]);
        Vocabulary::from_counts(&counts, 1)
    }

    #[test]
    fn output_dimension_is_embed_dim() {
        let model = EncoderModel::new(tiny_config(), 7).unwrap();
        let vocab = tiny_vocab();
        let tok = Tokenizer::new();
        let vec = model.encode(&vocab, &tok.tokenize("alpha beta"), None);
        assert_eq!(vec.len(), 8);
        assert!(vec.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn eval_mode_is_deterministic_train_mode_is_not_identity() {
        let model = EncoderModel::new(tiny_config(), 7).unwrap();
        let vocab = tiny_vocab();
        let tok = Tokenizer::new();
        let tokens = tok.tokenize("alpha beta gamma");
        let a = model.encode(&vocab, &tokens, None);
        let b = model.encode(&vocab, &tokens, None);
        assert_eq!(a, b);

        let c = model.encode(&vocab, &tokens, Some(99));
        let d = model.encode(&vocab, &tokens, Some(99));
        assert_eq!(c, d, "same dropout seed replays exactly");
        let e = model.encode(&vocab, &tokens, Some(100));
        assert_ne!(c, e, "different dropout seeds differ");
    }

    #[test]
    fn shared_weights_give_identical_query_and_passage_vectors() {
        let model = EncoderModel::new(tiny_config(), 3).unwrap();
        let vocab = tiny_vocab();
        let tok = Tokenizer::new();
        let tokens = tok.tokenize("gamma delta alpha");
        // queries and passages go through the same encoder and weights
        let as_query = model.encode(&vocab, &tokens, None);
        let as_passage = model.encode(&vocab, &tokens, None);
        assert_eq!(as_query, as_passage);
    }

    #[test]
    fn unknown_tokens_substitute_unk() {
        let model = EncoderModel::new(tiny_config(), 3).unwrap();
        let vocab = tiny_vocab();
        let tok = Tokenizer::new();
        let (ids, unk, _) = model.prepare_ids(&vocab, &tok.tokenize("alpha zzz"));
        assert_eq!(ids[0], CLS_ID);
        assert_eq!(unk, 1);
        let known = model.encode(&vocab, &tok.tokenize("alpha zzz"), None);
        let same = model.encode(&vocab, &tok.tokenize("alpha qqq"), None);
        assert_eq!(known, same, "all unknown surfaces map to the same vector");
    }

    #[test]
    fn long_sequences_truncate() {
        let model = EncoderModel::new(tiny_config(), 3).unwrap();
        let vocab = tiny_vocab();
        let tok = Tokenizer::new();
        let long = "alpha ".repeat(50);
        let (ids, _, truncated) = model.prepare_ids(&vocab, &tok.tokenize(&long));
        assert_eq!(ids.len(), 10);
        assert_eq!(truncated, 41);
    }

    #[test]
    fn score_is_the_inner_product() {
        let q = ndarray::arr1(&[1.0, 0.0]);
        let p = ndarray::arr1(&[0.5, 2.0]);
        assert_eq!(score(&q, &p).unwrap(), 0.5);

        let zero = ndarray::arr1(&[0.0, 0.0]);
        assert_eq!(score(&zero, &p).unwrap(), 0.0);

        let bad = ndarray::arr1(&[1.0, 2.0, 3.0]);
        assert!(matches!(score(&q, &bad), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn uniform_scores_give_ln_pool_size() {
        // m=2, pool of 4 (positives + negatives), all scores equal
        let scores = Array2::from_elem((2, 4), 0.3);
        let (loss, _, _) = loss_from_scores(&scores, &[0, 1]).unwrap();
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);

        // negatives disabled: pool of 2
        let scores = Array2::from_elem((2, 2), -1.7);
        let (loss, _, _) = loss_from_scores(&scores, &[0, 1]).unwrap();
        assert!((loss - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_is_shift_invariant_per_row() {
        let scores = ndarray::arr2(&[[0.3, -1.2, 0.8, 2.0], [1.0, 0.0, -0.5, 0.25]]);
        let (loss, _, _) = loss_from_scores(&scores, &[0, 1]).unwrap();
        let mut shifted = scores.clone();
        for (i, c) in [37.5, -11.25].iter().enumerate() {
            shifted.row_mut(i).mapv_inplace(|v| v + c);
        }
        let (loss2, _, _) = loss_from_scores(&shifted, &[0, 1]).unwrap();
        assert!((loss - loss2).abs() < 1e-6);
    }

    #[test]
    fn nan_scores_are_a_hard_error() {
        let mut scores = Array2::from_elem((2, 4), 0.5);
        scores[(1, 2)] = f64::NAN;
        let err = loss_from_scores(&scores, &[0, 1]).unwrap_err();
        assert!(matches!(err, Error::NanScore { index: 1 }));
    }

    #[test]
    fn finite_difference_gradients_tiny_model() {
        // quick inline check; the full acceptance-scale check lives in the
        // integration suite
        let config = EncoderConfig {
            vocab_size: 8,
            embed_dim: 4,
            layers: 1,
            heads: 2,
            ff_dim: 8,
            max_seq_len: 6,
            dropout: 0.0,
        };
        let model = EncoderModel::new(config, 5).unwrap();
        let ids: Vec<Vec<u32>> = vec![vec![1, 5, 6], vec![1, 6, 7, 5], vec![1, 7]];
        let d_cls_seed = 11;

        // loss: sum over sequences of dot(cls_vec, fixed random direction)
        let loss_of = |m: &EncoderModel| -> f64 {
            let mut rng = ChaCha8Rng::seed_from_u64(d_cls_seed);
            ids.iter()
                .map(|seq| {
                    let (v, _) = m.forward(seq, None);
                    let dir: Array1<f64> =
                        Array1::from_iter((0..v.len()).map(|_| rng.gen::<f64>() - 0.5));
                    v.dot(&dir)
                })
                .sum()
        };

        let mut grads = ParamSet::zeros(&model.config);
        {
            let mut rng = ChaCha8Rng::seed_from_u64(d_cls_seed);
            for seq in &ids {
                let (v, cache) = model.forward(seq, None);
                let dir: Array1<f64> =
                    Array1::from_iter((0..v.len()).map(|_| rng.gen::<f64>() - 0.5));
                model.backward(&cache, &dir, &mut grads);
            }
        }

        let eps = 1e-5;
        let analytic = grads.tensors();
        let mut probe = model.clone();
        for (gi, (name, gdata, _)) in analytic.iter().enumerate() {
            // probe a few entries per tensor to keep the test quick
            let stride = (gdata.len() / 5).max(1);
            for j in (0..gdata.len()).step_by(stride) {
                let orig = {
                    let mut tensors = probe.params.tensors_mut();
                    let v = tensors[gi].1[j];
                    tensors[gi].1[j] = v + eps;
                    v
                };
                let plus = loss_of(&probe);
                {
                    let mut tensors = probe.params.tensors_mut();
                    tensors[gi].1[j] = orig - eps;
                }
                let minus = loss_of(&probe);
                {
                    let mut tensors = probe.params.tensors_mut();
                    tensors[gi].1[j] = orig;
                }
                let fd = (plus - minus) / (2.0 * eps);
                let an = gdata[j];
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "{name}[{j}]: fd={fd} analytic={an}"
                );
            }
        }
    }

    #[test]
    fn zero_gradient_for_unused_parameters() {
        let config = tiny_config();
        let model = EncoderModel::new(config, 2).unwrap();
        let mut grads = ParamSet::zeros(&model.config);
        let ids = vec![1u32, 5, 6]; // uses positions 0..3 and token ids {1,5,6}
        let (v, cache) = model.forward(&ids, None);
        let dir = Array1::from_elem(v.len(), 1.0);
        model.backward(&cache, &dir, &mut grads);

        for unused_id in [0usize, 2, 3, 4, 7, 8, 9, 10, 11] {
            assert!(
                grads.token_emb.row(unused_id).iter().all(|&g| g == 0.0),
                "token {unused_id} must have zero gradient"
            );
        }
        for pos in 3..model.config.max_seq_len {
            assert!(grads.pos_emb.row(pos).iter().all(|&g| g == 0.0));
        }
        assert!(grads.token_emb.row(5).iter().any(|&g| g != 0.0));
    }
}
