//! Minimal dense neural-network stack: MLPs, a reverse-mode gradient tape
//! over vector-valued operations, and an Adam optimizer.

pub(crate) mod math;

pub mod adam;
pub mod mlp;
pub mod tape;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{Mlp, OutputActivation, LEAKY_SLOPE};
pub use tape::{Gradients, NodeRef, ParamId, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss node is not a scalar")]
    NotScalarLoss,
}
