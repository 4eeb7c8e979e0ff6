//! Dense tensors, reverse-mode differentiation and the optimizer.

mod adam;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState, Moments};
pub use gradcheck::{finite_diff_gradient, max_relative_error};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, NodeId, OpKind, Tape};
pub use tensor::Tensor;
