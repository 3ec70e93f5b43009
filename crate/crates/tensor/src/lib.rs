//! Dense row-major tensors with a reverse-mode computation tape.
//!
//! The crate is deliberately small: the operations it offers are exactly the
//! ones the concept-inference model needs (matmul, 1-D convolution, masked
//! softmax, max pooling, embedding gather, layer norm and a three-way
//! "cube" sum), each with a hand-written backward rule. Everything is generic
//! over [`Real`] so the same code runs in `f32` for training and `f64` for
//! finite-difference gradient checks.

mod adam;
pub mod checkpoint;
mod error;
pub mod kernels;
mod params;
mod real;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::{Checkpoint, CheckpointError};
pub use error::{Result, TensorError};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use real::{DType, Real};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
