//! Dense tensors with reverse-mode differentiation and AdamW.

pub mod checkpoint;
pub mod gradcheck;
mod kernels;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{grad_check, grad_check_sampled, GradCheckReport};
pub use optim::{AdamW, AdamWConfig, StepReport};
pub use params::{Bindings, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
