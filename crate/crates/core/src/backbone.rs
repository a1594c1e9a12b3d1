//! Session encoders and next-item scoring.
//!
//! [`Backbone`] is the pluggable encoder contract: it maps a padded batch of
//! sessions to an encoding `h` and maps `h` to logits over every catalog
//! item. [`GruAttention`] is the concrete encoder: a GRU over item
//! embeddings whose final state (global intent) is concatenated with an
//! attention-pooled summary of all hidden states (local intent). Items are
//! scored bilinearly against their embeddings.

use log::info;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Session;
use crate::error::{Error, Result};
use crate::numerics::{AdamState, Gradients, Graph, ParamMask, ParamStore, Tensor, Var};
use crate::rng::stage_rng;

/// Embedding row reserved for padding; item `i` lives in row `i + 1`.
pub const PAD_ROW: usize = 0;
/// Longer prefixes keep only their most recent items.
pub const MAX_SESSION_LEN: usize = 19;
/// Namespace of every encoder parameter.
pub const BACKBONE_PREFIX: &str = "backbone.";

/// A left-padded batch laid out step-major: entry `t·B + b` belongs to
/// session `b` at step `t`. Padding precedes the real items so every
/// session ends on the last step.
#[derive(Clone, Debug)]
pub struct SessionBatch {
    pub size: usize,
    pub steps: usize,
    pub rows: Vec<usize>,
    pub live: Vec<bool>,
    pub targets: Vec<usize>,
}

impl SessionBatch {
    pub fn new(sessions: &[&Session], max_len: usize) -> Self {
        let size = sessions.len();
        let lens: Vec<usize> = sessions.iter().map(|s| s.items.len().min(max_len)).collect();
        let steps = lens.iter().copied().max().unwrap_or(0);
        let mut rows = vec![PAD_ROW; steps * size];
        let mut live = vec![false; steps * size];
        for (b, s) in sessions.iter().enumerate() {
            let kept = &s.items[s.items.len() - lens[b]..];
            let offset = steps - lens[b];
            for (j, &item) in kept.iter().enumerate() {
                rows[(offset + j) * size + b] = item + 1;
                live[(offset + j) * size + b] = true;
            }
        }
        SessionBatch {
            size,
            steps,
            rows,
            live,
            targets: sessions.iter().map(|s| s.target).collect(),
        }
    }

    fn live_at(&self, t: usize) -> &[bool] {
        &self.live[t * self.size..(t + 1) * self.size]
    }
}

/// Encoder contract. Implementations register their parameters under
/// [`BACKBONE_PREFIX`].
pub trait Backbone {
    fn kind(&self) -> &'static str;
    fn item_count(&self) -> usize;
    /// Width of the session encoding `h`.
    fn encoding_dim(&self) -> usize;
    fn init_params(&self, store: &mut ParamStore, seed: u64);
    /// `B × encoding_dim` session encodings.
    fn encode(&self, g: &mut Graph, batch: &SessionBatch) -> Result<Var>;
    /// `B × item_count` logits from encodings.
    fn score(&self, g: &mut Graph, h: Var) -> Result<Var>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruAttention {
    pub item_count: usize,
    pub dim: usize,
}

const EMBEDDING: &str = "backbone.item_embedding";
const GRU_INPUT: &str = "backbone.gru.w_input";
const GRU_HIDDEN_RZ: &str = "backbone.gru.w_hidden_rz";
const GRU_HIDDEN_N: &str = "backbone.gru.w_hidden_n";
const GRU_BIAS: &str = "backbone.gru.bias";
const ATTN_QUERY: &str = "backbone.attn.query";
const ATTN_KEY: &str = "backbone.attn.key";
const ATTN_SCORE: &str = "backbone.attn.score";
const BILINEAR: &str = "backbone.bilinear";

/// Uniform `[-1/√fan, 1/√fan]` tensor drawn from a per-name stream.
pub(crate) fn uniform_init(seed: u64, name: &str, rows: usize, cols: usize, fan: usize) -> Tensor {
    let bound = 1.0 / (fan as f64).sqrt();
    let mut rng = stage_rng(seed, &format!("init/{name}"));
    let data = (0..rows * cols).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::from_rows(rows, cols, data).expect("sized data")
}

impl Backbone for GruAttention {
    fn kind(&self) -> &'static str {
        "gru_attention"
    }

    fn item_count(&self) -> usize {
        self.item_count
    }

    fn encoding_dim(&self) -> usize {
        2 * self.dim
    }

    fn init_params(&self, store: &mut ParamStore, seed: u64) {
        let d = self.dim;
        let mut emb = uniform_init(seed, EMBEDDING, self.item_count + 1, d, d);
        emb.row_mut(PAD_ROW).fill(0.0);
        store.insert(EMBEDDING, emb);
        for (name, rows, cols) in [
            (GRU_INPUT, d, 3 * d),
            (GRU_HIDDEN_RZ, d, 2 * d),
            (GRU_HIDDEN_N, d, d),
            (GRU_BIAS, 1, 3 * d),
            (ATTN_QUERY, d, d),
            (ATTN_KEY, d, d),
            (ATTN_SCORE, d, 1),
            (BILINEAR, 2 * d, d),
        ] {
            store.insert(name, uniform_init(seed, name, rows, cols, d));
        }
    }

    fn encode(&self, g: &mut Graph, batch: &SessionBatch) -> Result<Var> {
        let (b, d) = (batch.size, self.dim);
        if b == 0 || batch.steps == 0 {
            return Err(Error::Data("cannot encode an empty batch".into()));
        }
        let emb = g.param(EMBEDDING)?;
        let w_in = g.param(GRU_INPUT)?;
        let w_rz = g.param(GRU_HIDDEN_RZ)?;
        let w_n = g.param(GRU_HIDDEN_N)?;
        let bias = g.param(GRU_BIAS)?;

        // input projections for every step at once
        let x = g.gather(emb, batch.rows.clone())?;
        let xw = g.matmul(x, w_in)?;
        let xw = g.add_row(xw, bias)?;

        let mut h = g.input(Tensor::zeros(b, d));
        let mut states = Vec::with_capacity(batch.steps);
        for t in 0..batch.steps {
            let xt = g.slice_rows(xw, t * b, b)?;
            let x_rz = g.slice_cols(xt, 0, 2 * d)?;
            let x_n = g.slice_cols(xt, 2 * d, d)?;
            let h_rz = g.matmul(h, w_rz)?;
            let pre = g.add(x_rz, h_rz)?;
            let rz = g.sigmoid(pre)?;
            let r = g.slice_cols(rz, 0, d)?;
            let z = g.slice_cols(rz, d, d)?;
            let rh = g.mul(r, h)?;
            let rh_n = g.matmul(rh, w_n)?;
            let pre_n = g.add(x_n, rh_n)?;
            let n = g.tanh(pre_n)?;
            let delta = g.sub(n, h)?;
            let step = g.mul(z, delta)?;
            let h_new = g.add(h, step)?;
            let live = batch.live_at(t);
            h = if live.iter().all(|&l| l) {
                h_new
            } else {
                g.select_rows(live.to_vec(), h_new, h)?
            };
            states.push(h);
        }

        // attention of the final state over every hidden state
        let query = g.param(ATTN_QUERY)?;
        let key = g.param(ATTN_KEY)?;
        let v = g.param(ATTN_SCORE)?;
        let q = g.matmul(h, query)?;
        let mut energies = Vec::with_capacity(states.len());
        for &s in &states {
            let k = g.matmul(s, key)?;
            let qk = g.add(q, k)?;
            let act = g.sigmoid(qk)?;
            energies.push(g.matmul(act, v)?);
        }
        let e = g.concat_cols(&energies)?;
        let mut mask = vec![false; b * batch.steps];
        for t in 0..batch.steps {
            for (row, &l) in batch.live_at(t).iter().enumerate() {
                mask[row * batch.steps + t] = l;
            }
        }
        let alpha = g.masked_softmax_rows(e, mask)?;
        let mut local: Option<Var> = None;
        for (t, &s) in states.iter().enumerate() {
            let a_t = g.slice_cols(alpha, t, 1)?;
            let term = g.mul_col(s, a_t)?;
            local = Some(match local {
                Some(acc) => g.add(acc, term)?,
                None => term,
            });
        }
        let local = local.expect("at least one step");
        g.concat_cols(&[h, local])
    }

    fn score(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let bilinear = g.param(BILINEAR)?;
        let emb = g.param(EMBEDDING)?;
        let z = g.matmul(h, bilinear)?;
        g.matmul_bt(z, emb, PAD_ROW + 1)
    }
}

/// The `n` highest-scoring items, score-descending, ties to the lower index.
pub fn top_n(scores: &[f64], n: usize) -> Vec<usize> {
    let n = n.min(scores.len());
    if n == 0 {
        return Vec::new();
    }
    let cmp = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    if n < idx.len() {
        idx.select_nth_unstable_by(n - 1, cmp);
        idx.truncate(n);
    }
    idx.sort_unstable_by(cmp);
    idx
}

/// `-ln softmax(scores)[target]`.
pub fn cross_entropy_loss(scores: &[f64], target: usize) -> f64 {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scores.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    lse - scores[target]
}

/// Forward pass only: logits for a batch of sessions.
pub fn batch_logits(encoder: &dyn Backbone, params: &ParamStore, sessions: &[&Session], max_len: usize) -> Result<Tensor> {
    let mut g = Graph::new(params);
    let batch = SessionBatch::new(sessions, max_len);
    let h = encoder.encode(&mut g, &batch)?;
    let logits = encoder.score(&mut g, h)?;
    Ok(g.value(logits).clone())
}

/// Top-`n` lists for many sessions, computed in length-sorted chunks. Each
/// row of the forward pass depends only on its own session, so the result
/// does not depend on chunking.
pub fn recommend_all(
    encoder: &dyn Backbone,
    params: &ParamStore,
    sessions: &[&Session],
    n: usize,
    max_len: usize,
) -> Result<Vec<Vec<usize>>> {
    const CHUNK: usize = 256;
    let mut order: Vec<usize> = (0..sessions.len()).collect();
    order.sort_by_key(|&i| sessions[i].items.len().min(max_len));
    let mut out = vec![Vec::new(); sessions.len()];
    for chunk in order.chunks(CHUNK) {
        let batch: Vec<&Session> = chunk.iter().map(|&i| sessions[i]).collect();
        let logits = batch_logits(encoder, params, &batch, max_len)?;
        for (r, &i) in chunk.iter().enumerate() {
            out[i] = top_n(logits.row(r), n);
        }
    }
    Ok(out)
}

/// Share of sessions whose target appears in their top-`n` list.
pub fn recall_at(encoder: &dyn Backbone, params: &ParamStore, sessions: &[Session], n: usize, max_len: usize) -> Result<f64> {
    if sessions.is_empty() {
        return Err(Error::Data("recall over an empty session set".into()));
    }
    let refs: Vec<&Session> = sessions.iter().collect();
    let lists = recommend_all(encoder, params, &refs, n, max_len)?;
    let hits = lists.iter().zip(sessions).filter(|(l, s)| l.contains(&s.target)).count();
    Ok(hits as f64 / sessions.len() as f64)
}

/// Minibatches with similar lengths: shuffle, sort by length inside pools
/// of 32 batches, then shuffle the batch order.
pub fn make_batches(sessions: &[Session], batch_size: usize, max_len: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    const POOL: usize = 32;
    let mut idx: Vec<usize> = (0..sessions.len()).collect();
    idx.shuffle(rng);
    let mut batches = Vec::new();
    for pool in idx.chunks_mut(batch_size * POOL) {
        pool.sort_by_key(|&i| sessions[i].items.len().min(max_len));
        batches.extend(pool.chunks(batch_size).map(<[usize]>::to_vec));
    }
    batches.shuffle(rng);
    batches
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    /// List length used for validation recall.
    pub n: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 128,
            epochs: 10,
            patience: 3,
            n: 20,
            max_len: MAX_SESSION_LEN,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_recall: Option<f64>,
}

/// One cross-entropy step on a batch; returns the batch loss.
pub fn ce_step(
    encoder: &dyn Backbone,
    params: &mut ParamStore,
    optimizer: &mut AdamState,
    batch: &[&Session],
    max_len: usize,
) -> Result<f64> {
    let mut grads = Gradients::new();
    let loss = {
        let mut g = Graph::new(params);
        let sb = SessionBatch::new(batch, max_len);
        let h = encoder.encode(&mut g, &sb)?;
        let logits = encoder.score(&mut g, h)?;
        let ce = g.cross_entropy(logits, sb.targets.clone())?;
        let loss = g.value(ce).data()[0];
        if !loss.is_finite() {
            return Err(Error::Divergence(format!("cross entropy became {loss}")));
        }
        g.backward(ce, &ParamMask::prefix(BACKBONE_PREFIX), &mut grads)?;
        loss
    };
    optimizer.step(params, &grads)?;
    Ok(loss)
}

/// Minibatch Adam on cross entropy over every training sample. After each
/// epoch the validation Recall@n is measured; the best epoch's parameters
/// are kept and training stops after `patience` epochs without improvement.
pub fn pretrain(
    encoder: &dyn Backbone,
    params: &mut ParamStore,
    optimizer: &mut AdamState,
    train: &[Session],
    valid: &[Session],
    cfg: &TrainConfig,
) -> Result<Vec<EpochLog>> {
    if train.is_empty() {
        return Err(Error::Data("pretraining needs at least one sample".into()));
    }
    let mut rng = stage_rng(cfg.seed, "pretrain/batches");
    let mut log = Vec::new();
    let mut best: Option<(f64, ParamStore, AdamState)> = None;
    let mut stale = 0;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for idx in make_batches(train, cfg.batch_size, cfg.max_len, &mut rng) {
            let batch: Vec<&Session> = idx.iter().map(|&i| &train[i]).collect();
            total += ce_step(encoder, params, optimizer, &batch, cfg.max_len)? * batch.len() as f64;
        }
        let train_loss = total / train.len() as f64;
        let valid_recall = if valid.is_empty() {
            None
        } else {
            Some(recall_at(encoder, params, valid, cfg.n, cfg.max_len)?)
        };
        info!("pretrain epoch {epoch}: loss {train_loss:.4}, valid recall {valid_recall:?}");
        log.push(EpochLog {
            epoch,
            train_loss,
            valid_recall,
        });
        if let Some(r) = valid_recall {
            if best.as_ref().is_none_or(|b| r > b.0) {
                best = Some((r, params.clone(), optimizer.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience {
                    break;
                }
            }
        }
    }
    if let Some((_, p, o)) = best {
        *params = p;
        *optimizer = o;
    }
    Ok(log)
}
