//! Minimal dense-network engine: matrices, layers with forward/backward,
//! loss functions, and stochastic-gradient optimizers.
//!
//! Everything is 64-bit and deterministic: identical inputs and weights
//! produce bit-identical outputs, and all randomness (weight init,
//! reparameterization noise) enters through caller-supplied RNGs.

mod layer;
mod loss;
mod matrix;
mod optim;

pub use layer::{
    backward_layers, forward_layers, glorot_uniform, Activation, DenseLayer, LayerCache,
    LayerGrads,
};
pub use loss::{
    cross_entropy, cross_entropy_grad, kl_grads, kl_standard_normal, loss_value, mse, mse_grad,
    LossKind, PROB_CLAMP,
};
pub use matrix::Matrix;
pub use optim::{optimizer_step, OptimizerKind, OptimizerSpec, ParamState};

use thiserror::Error;

/// Errors from the numerical engine. Shape mismatches carry the operation
/// name and both shapes so failures point at the offending call site.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum NnError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("loss requires latent (mu, log_var) matrices from a sampling component")]
    MissingLatent,
    #[error("invalid optimizer: {0}")]
    InvalidOptimizer(String),
}
