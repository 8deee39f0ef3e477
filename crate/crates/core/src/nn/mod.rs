//! Dense tensors, a reverse-mode tape, AdamW and checkpoint I/O.

pub mod checkpoint;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use optim::AdamW;
pub use param::{Param, ParamId, ParamStore};
pub use tape::{log_softmax_at, softmax_f64, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor};

#[cfg(test)]
mod tests;
