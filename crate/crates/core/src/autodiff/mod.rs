//! Reverse-mode differentiation over dense matrices, plus the optimizer and
//! feed-forward blocks shared by every learnable component.

mod adam;
mod graph;
mod nn;
mod params;
mod tensor;

pub use adam::{adam_step, Adam, AdamConfig, AdamError, AdamState};
pub use graph::{backward, AutodiffError, Axis, GatherTaps, Gradients, Graph, NodeId, Op};
pub use nn::{glorot_uniform, Activation, Linear, MlpBlock, VARIANCE_FLOOR};
pub use params::{ParamId, ParamStore};
pub use tensor::{Tensor, TensorError};
