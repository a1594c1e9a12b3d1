use std::collections::BTreeMap;

use super::graph::{Gradients, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub first: Tensor,
    pub second: Tensor,
    /// Number of updates applied to this parameter.
    pub step: u64,
}

/// Adam optimizer state with per-parameter moments and step counters.
///
/// Parameters are updated only when they appear in the gradient set, so a
/// parameter frozen for a whole phase keeps both its value and its moments.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    moments: BTreeMap<String, Moments>,
    steps: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            moments: BTreeMap::new(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> impl Iterator<Item = (&str, &Moments)> {
        self.moments.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub(crate) fn restore(config: AdamConfig, steps: u64, moments: BTreeMap<String, Moments>) -> Self {
        AdamState {
            config,
            moments,
            steps,
        }
    }

    /// One bias-corrected Adam update of every parameter present in `grads`.
    /// Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Gradients) -> Result<()> {
        for (name, g) in grads.iter() {
            if !g.is_finite() {
                return Err(Error::Divergence(format!("non-finite gradient for parameter {name}")));
            }
            let p = params
                .get(name)
                .ok_or_else(|| Error::Graph(format!("gradient for unknown parameter {name}")))?;
            if !p.same_shape(g) {
                return Err(Error::Shape {
                    op: "adam_step",
                    left: p.shape().to_vec(),
                    right: g.shape().to_vec(),
                });
            }
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        for (name, g) in grads.iter() {
            let p = params.get_mut(name).expect("checked above");
            let m = self.moments.entry(name.to_string()).or_insert_with(|| Moments {
                first: Tensor::zeros(p.rows(), p.cols()),
                second: Tensor::zeros(p.rows(), p.cols()),
                step: 0,
            });
            m.step += 1;
            let bc1 = 1.0 - beta1.powi(m.step as i32);
            let bc2 = 1.0 - beta2.powi(m.step as i32);
            let pd = p.data_mut();
            let md = m.first.data_mut();
            let vd = m.second.data_mut();
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = beta1 * md[i] + (1.0 - beta1) * gi;
                vd[i] = beta2 * vd[i] + (1.0 - beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.steps += 1;
        Ok(())
    }
}
