//! Differentiable tensor substrate: tensors, taped operations, Adam, and gradient checks.

pub mod gradcheck;
pub mod kernels;
pub mod metrics;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{check_inputs, check_params, relative_error, GradCheckReport};
pub use metrics::{l1_loss, mean_std, rmse};
pub use params::{AdamConfig, AdamState, ParamStore};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::Result;

/// Layer-norm epsilon used throughout the models.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Single-head `softmax(Q Kᵀ / √d_k) V` on plain tensors.
pub fn scaled_dot_attention<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>, v: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
    let out = tape.attention(q, k, v, 1, 1)?;
    Ok(tape.tensor(out))
}

/// Attention weights `softmax(Q Kᵀ / √d_k)` of a single head.
pub fn attention_weights<T: Scalar>(q: &Tensor<T>, k: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (qv, kv) = (tape.constant(q.clone()), tape.constant(k.clone()));
    let vv = tape.constant(k.clone());
    let out = tape.attention(qv, kv, vv, 1, 1)?;
    let (probs, _, _, n_q, n_k) = tape.attention_probs(out).expect("attention node");
    Tensor::new(&[n_q, n_k], probs.to_vec())
}
