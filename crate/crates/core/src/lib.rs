//! Talking-heads attention and its relatives on a small named-axis einsum
//! engine, with reverse-mode gradients, exact multiply/parameter accounting
//! and a toy masked-language-model harness.

pub mod attention;
pub mod autograd;
pub mod cost;
pub mod engine;
pub mod error;
pub mod linalg;
pub mod lm;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Axis, CounterChannel, Tensor};
