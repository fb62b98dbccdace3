//! Reverse-mode automatic differentiation over scalars and small dense
//! tensors, plus the Adam optimizer. Double precision throughout; graphs are
//! rebuilt per step.

mod graph;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{AdamConfig, ParamId, ParamStore};
pub use tensor::{Shape, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("parameter `{name}` is already registered")]
    DuplicateParam { name: String },
    #[error("backward requires a scalar root, got {shape:?}")]
    NonScalarRoot { shape: Shape },
    #[error("non-finite gradient for parameter `{name}`")]
    NonFiniteGradient { name: String },
}
