//! Dense tensors with a reverse-mode tape, the sequence layers used by the
//! skip-prediction models (dilated causal convolution, instance norm,
//! highway/GLU gates, multi-head attention), masked losses, Adam, and a
//! checksummed parameter file format.

pub mod adam;
pub mod attention;
pub mod checkpoint;
pub mod conv;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod norm;
pub mod ops;
pub mod params;
mod real;
pub mod tape;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use attention::AttnMask;
pub use checkpoint::Checkpoint;
pub use conv::{Conv1dSpec, Padding};
pub use error::{Result, TensorError};
pub use nn::GateKind;
pub use norm::NormMode;
pub use params::{Bound, ParamId, ParamStore};
pub use real::Real;
pub use tape::{Activation, Gradients, LossKind, Tape, Var};
pub use tensor::Tensor;
