//! Calibration head and the weighted KL objectives.
//!
//! The head is a one-hidden-layer tanh network mapping a session encoding to
//! a predicted head/tail mix `p̂`. Two losses use it:
//!
//! * prediction, `p_s(1)·KL(p̂ ‖ p_s)` where `p_s` is the mix of the model's
//!   own top-N list; its gradient updates the head only;
//! * alignment, `q_s(1)·KL(p̂ ‖ q_s)` where `q_s` is the mix of the observed
//!   session; its gradient updates the encoder only.
//!
//! Both are added to cross entropy as `L = L_CE + λ(L_WP + L_WQ)`, with
//! each term's gradient restricted to its parameter group by masked
//! backward passes over a shared forward graph.

use serde::{Deserialize, Serialize};

use crate::backbone::{top_n, Backbone, SessionBatch, BACKBONE_PREFIX};
use crate::corpus::{list_distribution, session_distribution, Catalog, PopDistribution, Session};
use crate::error::{Error, Result};
use crate::numerics::{kl_divergence, AdamState, Gradients, Graph, ParamMask, ParamStore, Tensor, Var};

pub const HEAD_PREFIX: &str = "head.";

const HIDDEN_W: &str = "head.hidden.weight";
const HIDDEN_B: &str = "head.hidden.bias";
const OUTPUT_W: &str = "head.output.weight";
const OUTPUT_B: &str = "head.output.bias";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CalibrationHead {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

impl CalibrationHead {
    /// Hidden width equals the encoding width.
    pub fn for_encoding(dim: usize) -> Self {
        CalibrationHead {
            input_dim: dim,
            hidden_dim: dim,
        }
    }

    pub fn init_params(&self, store: &mut ParamStore, seed: u64) {
        use crate::backbone::uniform_init;
        let (i, h) = (self.input_dim, self.hidden_dim);
        store.insert(HIDDEN_W, uniform_init(seed, HIDDEN_W, i, h, i));
        store.insert(HIDDEN_B, uniform_init(seed, HIDDEN_B, 1, h, i));
        store.insert(OUTPUT_W, uniform_init(seed, OUTPUT_W, h, 2, h));
        store.insert(OUTPUT_B, uniform_init(seed, OUTPUT_B, 1, 2, h));
    }

    /// `softmax(W2·tanh(W1·h + b1) + b2)`, a `B×2` head/tail distribution.
    pub fn predict(&self, g: &mut Graph, h: Var) -> Result<Var> {
        let w1 = g.param(HIDDEN_W)?;
        let b1 = g.param(HIDDEN_B)?;
        let w2 = g.param(OUTPUT_W)?;
        let b2 = g.param(OUTPUT_B)?;
        let a = g.matmul(h, w1)?;
        let a = g.add_row(a, b1)?;
        let a = g.tanh(a)?;
        let o = g.matmul(a, w2)?;
        let o = g.add_row(o, b2)?;
        g.softmax_rows(o)
    }
}

/// Predicted distribution for a single encoding vector.
pub fn predict_distribution(head: &CalibrationHead, params: &ParamStore, h: &[f64]) -> Result<PopDistribution> {
    let mut g = Graph::new(params);
    let hv = g.input(Tensor::from_rows(1, h.len(), h.to_vec())?);
    let p = head.predict(&mut g, hv)?;
    let v = g.value(p);
    Ok(PopDistribution {
        head: v.data()[0],
        tail: v.data()[1],
    })
}

/// `p_s(1)·KL(p̂ ‖ p_s)`.
pub fn prediction_loss(p_hat: &PopDistribution, p_s: &PopDistribution) -> f64 {
    p_s.tail * kl_divergence(&p_hat.as_array(), &p_s.as_array())
}

/// `q_s(1)·KL(p̂ ‖ q_s)`.
pub fn alignment_loss(p_hat: &PopDistribution, q_s: &PopDistribution) -> f64 {
    q_s.tail * kl_divergence(&p_hat.as_array(), &q_s.as_array())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub lambda: f64,
    /// Top-N size used for `p_s`.
    pub n: usize,
    /// Drop the cross-entropy term.
    pub no_ce: bool,
    /// Replace the `p_s(1)` / `q_s(1)` weights with 1.
    pub no_wl: bool,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            lambda: 1.0,
            n: 20,
            no_ce: false,
            no_wl: false,
        }
    }
}

/// Per-batch quantities of a calibration step.
#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationBatchState {
    pub p_s: Vec<PopDistribution>,
    pub q_s: Vec<PopDistribution>,
    pub p_hat: Vec<PopDistribution>,
    pub l_ce: f64,
    pub l_wp: f64,
    pub l_wq: f64,
}

impl CalibrationBatchState {
    pub fn total(&self, cfg: &CalibrationConfig) -> f64 {
        let ce = if cfg.no_ce { 0.0 } else { self.l_ce };
        ce + cfg.lambda * (self.l_wp + self.l_wq)
    }
}

/// Loss nodes of one traced calibration forward pass.
pub struct CalibrationGraph<'p> {
    pub graph: Graph<'p>,
    pub ce: Var,
    pub wp: Var,
    pub wq: Var,
    pub state: CalibrationBatchState,
}

fn dist_tensor(d: &[PopDistribution]) -> Tensor {
    let data = d.iter().flat_map(|p| p.as_array()).collect();
    Tensor::from_rows(d.len(), 2, data).expect("two columns")
}

/// Traces encoder, scorer and head for `batch`. `p_s` comes from the top-N
/// of the logits in this same pass, so no gradient flows through the list.
pub fn trace<'p>(
    encoder: &dyn Backbone,
    head: &CalibrationHead,
    params: &'p ParamStore,
    catalog: &Catalog,
    batch: &[&Session],
    cfg: &CalibrationConfig,
    max_len: usize,
) -> Result<CalibrationGraph<'p>> {
    let mut g = Graph::new(params);
    let sb = SessionBatch::new(batch, max_len);
    let h = encoder.encode(&mut g, &sb)?;
    let logits = encoder.score(&mut g, h)?;
    let ce = g.cross_entropy(logits, sb.targets.clone())?;

    let lv = g.value(logits);
    let p_s = (0..batch.len())
        .map(|r| list_distribution(&top_n(lv.row(r), cfg.n), catalog))
        .collect::<Result<Vec<_>>>()?;
    let q_s: Vec<PopDistribution> = batch.iter().map(|s| session_distribution(s, catalog)).collect();

    let p_hat = head.predict(&mut g, h)?;
    let weight = |d: &PopDistribution| if cfg.no_wl { 1.0 } else { d.tail };
    let kl_p = g.kl_rows(p_hat, dist_tensor(&p_s))?;
    let wp = g.weighted_mean(kl_p, p_s.iter().map(weight).collect())?;
    let kl_q = g.kl_rows(p_hat, dist_tensor(&q_s))?;
    let wq = g.weighted_mean(kl_q, q_s.iter().map(weight).collect())?;

    let ph = g.value(p_hat);
    let p_hat_d = (0..batch.len())
        .map(|r| PopDistribution {
            head: ph.get(r, 0),
            tail: ph.get(r, 1),
        })
        .collect();
    let state = CalibrationBatchState {
        l_ce: g.value(ce).data()[0],
        l_wp: g.value(wp).data()[0],
        l_wq: g.value(wq).data()[0],
        p_s,
        q_s,
        p_hat: p_hat_d,
    };
    Ok(CalibrationGraph {
        graph: g,
        ce,
        wp,
        wq,
        state,
    })
}

/// Routed gradients of the combined loss:
/// encoder ← `L_CE + λ·L_WQ`, head ← `λ·L_WP`.
pub fn routed_gradients(cg: &mut CalibrationGraph<'_>, cfg: &CalibrationConfig) -> Result<Gradients> {
    let g = &mut cg.graph;
    let mut grads = Gradients::new();
    let align = g.scale(cg.wq, cfg.lambda)?;
    let encoder_loss = if cfg.no_ce { align } else { g.add(cg.ce, align)? };
    g.backward(encoder_loss, &ParamMask::prefix(BACKBONE_PREFIX), &mut grads)?;
    let predict = g.scale(cg.wp, cfg.lambda)?;
    g.backward(predict, &ParamMask::prefix(HEAD_PREFIX), &mut grads)?;
    Ok(grads)
}

fn check_finite(state: &CalibrationBatchState) -> Result<()> {
    for (name, v) in [("cross entropy", state.l_ce), ("L_WP", state.l_wp), ("L_WQ", state.l_wq)] {
        if !v.is_finite() {
            return Err(Error::Divergence(format!("{name} became {v}")));
        }
    }
    Ok(())
}

/// One Adam step on `L = L_CE + λ(L_WP + L_WQ)` with routed gradients.
#[allow(clippy::too_many_arguments)]
pub fn combined_step(
    encoder: &dyn Backbone,
    head: &CalibrationHead,
    params: &mut ParamStore,
    optimizer: &mut AdamState,
    catalog: &Catalog,
    batch: &[&Session],
    cfg: &CalibrationConfig,
    max_len: usize,
) -> Result<CalibrationBatchState> {
    let (grads, state) = {
        let mut cg = trace(encoder, head, params, catalog, batch, cfg, max_len)?;
        check_finite(&cg.state)?;
        let grads = routed_gradients(&mut cg, cfg)?;
        (grads, cg.state)
    };
    optimizer.step(params, &grads)?;
    Ok(state)
}

/// Head-only step on `L_WP` with the encoder frozen.
#[allow(clippy::too_many_arguments)]
pub fn head_warmup_step(
    encoder: &dyn Backbone,
    head: &CalibrationHead,
    params: &mut ParamStore,
    optimizer: &mut AdamState,
    catalog: &Catalog,
    batch: &[&Session],
    cfg: &CalibrationConfig,
    max_len: usize,
) -> Result<CalibrationBatchState> {
    let (grads, state) = {
        let cg = trace(encoder, head, params, catalog, batch, cfg, max_len)?;
        check_finite(&cg.state)?;
        let mut grads = Gradients::new();
        cg.graph.backward(cg.wp, &ParamMask::prefix(HEAD_PREFIX), &mut grads)?;
        (grads, cg.state)
    };
    optimizer.step(params, &grads)?;
    Ok(state)
}
