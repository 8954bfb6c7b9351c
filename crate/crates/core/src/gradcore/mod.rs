//! Differentiable dual-latent network: tensors, the autodiff tape, the
//! encoder/decoder/classifier topology, Adam, gradient verification and
//! checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod network;
pub mod tensor;

pub use adam::{AdamHyper, AdamState};
pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use network::{Architecture, LatentPair, LatentVars, MedLatent, ModelKind, ModelParams, Network, SensitLatent};
pub use tensor::{Scalar, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum GradError {
    #[error("{what} shape mismatch: expected {expected}, got {got}")]
    Shape {
        what: &'static str,
        expected: String,
        got: String,
    },
    #[error("non-finite gradient in parameter tensor `{0}`")]
    NonFiniteGradient(String),
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint config block: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Gradient of `loss` for every bound parameter, in layout order.
pub fn collect_grads<T: Scalar>(g: &Graph<T>, bound: &network::Bound, loss: Var) -> Vec<Tensor<T>> {
    let grads = g.backward(loss);
    bound.vars.iter().map(|&v| grads.wrt(v)).collect()
}
