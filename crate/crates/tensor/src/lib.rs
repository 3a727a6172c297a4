//! Minimal dense tensors with the neural kernels and reverse-mode
//! differentiation used by the world-model stack.

mod error;
pub mod gradcheck;
pub mod graph;
pub mod io;
pub mod kernels;
mod params;
mod tensor;

pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use kernels::{conv2d, scaled_dot_attention, softmax};
pub use params::{Adam, ParamId, ParamStore};
pub use tensor::{DType, Element, Tensor};
