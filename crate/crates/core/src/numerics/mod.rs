//! Dense tensors, reverse-mode differentiation and the Adam optimizer.

mod adam;
mod checkpoint;
mod init;
mod kernels;
mod tape;
mod tensor;
mod topk;

pub use adam::AdamState;
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_VERSION};
pub use init::{xavier_kernel, zero_bias};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;
pub use topk::topk_indices;
