//! Dense feed-forward networks with hand-written reverse-mode gradients.

mod adam;
mod mlp;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use mlp::{Activation, Layer, Mlp, MlpShape, Trace};
pub use tensor::Tensor2;
