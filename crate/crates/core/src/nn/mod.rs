//! Dense-network numerics with hand-derived gradients.

pub mod adam;
pub mod gradcheck;
pub mod init;
pub mod layer;
pub mod loss;
pub mod matrix;
pub mod mlp;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use init::{kaiming_init, kaiming_std};
pub use layer::{Activation, DenseLayer, LayerCache, LayerGrads, LEAKY_SLOPE};
pub use loss::{mse_loss, sigmoid, softmax, softmax_backward};
pub use matrix::{gemm, Matrix};
pub use mlp::{flatten_grads, Mlp, MlpCache, MlpOptimizer};

/// Forward pass of a single dense layer.
pub fn dense_forward(layer: &DenseLayer, input: &[f64]) -> crate::Result<(Vec<f64>, LayerCache)> {
    layer.forward(input)
}

/// Backward pass of a single dense layer: `(grad_weights, grad_bias, grad_input)`.
pub fn dense_backward(
    layer: &DenseLayer,
    cache: &LayerCache,
    upstream: &[f64],
) -> crate::Result<(Matrix, Vec<f64>, Vec<f64>)> {
    layer.backward(cache, upstream)
}
