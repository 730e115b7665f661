//! Dense-array kernels with hand-written gradients: dense and GRU layers,
//! losses, optimizers, initialization, gradient checking and checkpoints.

pub mod checkpoint;
pub mod dense;
pub mod gradcheck;
pub mod gru;
pub mod init;
pub mod loss;
pub mod optim;
pub mod tensor;

use thiserror::Error;

pub use dense::{dense_backward, dense_forward, sigmoid, Activation, DenseCache, DenseParams};
pub use gradcheck::{grad_check, GradCheck};
pub use gru::{gru_backward, gru_backward_seq, gru_forward, gru_forward_seq, GruCache, GruParams};
pub use init::glorot_init;
pub use loss::{bce_loss, bce_with_logits, mse_loss};
pub use optim::{OptimizerKind, OptimizerState};
pub use tensor::{Real, Tensor};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
