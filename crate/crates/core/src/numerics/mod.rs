//! Dense tensors, a reverse-mode tape, Adam, and the checkpoint container.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod element;
pub mod gradcheck;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::{clip_grad_norm, AdamConfig, AdamState};
pub use attention::{attention_weights, AttnSpec};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use element::Element;
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use params::{ParamId, ParamStore};
pub use tape::{attention, Gradients, Tape, Var};
pub use tensor::Tensor;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum NumericsError {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFiniteValue { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
}
