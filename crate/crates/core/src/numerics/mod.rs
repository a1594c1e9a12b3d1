//! Dense tensors, reverse-mode autodiff, Adam, and the checkpoint container.

mod adam;
mod checkpoint;
mod graph;
mod tensor;

pub use adam::{AdamConfig, AdamState, Moments};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, ParamMask, ParamStore, Var, KL_LOG_CLAMP};
pub use tensor::{matmul, matmul_at, matmul_bt, softmax_rows, Tensor};

/// `Σ_i p(i)·ln(p(i)/target(i))` with `target` clamped to
/// `[KL_LOG_CLAMP, 1 - KL_LOG_CLAMP]`; zero-mass entries of `p` contribute 0.
pub fn kl_divergence(p: &[f64], target: &[f64]) -> f64 {
    p.iter()
        .zip(target)
        .map(|(&pi, &ti)| {
            if pi > 0.0 {
                let t = ti.clamp(KL_LOG_CLAMP, 1.0 - KL_LOG_CLAMP);
                pi * (pi / t).ln()
            } else {
                0.0
            }
        })
        .sum()
}
