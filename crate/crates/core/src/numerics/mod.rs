//! Dense tensors, reverse-mode differentiation and parameter storage.

mod checkpoint;
mod param;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{cross_entropy_values, softmax_values, Gradients, Tape, Var, PROB_EPS};
pub use tensor::{Mask, Scalar, Tensor};
