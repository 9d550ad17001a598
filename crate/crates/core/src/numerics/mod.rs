//! Dense `f32` tensors and a reverse-mode tape.

mod gemm;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Tape, Var};
pub use tensor::Tensor;


#[cfg(test)]
mod tests;
