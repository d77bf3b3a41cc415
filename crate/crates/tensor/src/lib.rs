//! Dense row-major `f64` tensors and a reverse-mode gradient tape.
//!
//! The tape is deliberately small: it knows the handful of operations a
//! patch transformer needs (affine maps, layer norm, GELU, softmax, fused
//! multi-head attention, gathers and concatenations, cross-entropy) and
//! nothing else. Every operation is recorded in execution order, so the
//! node list is already topologically sorted and [`Tape::backward`] is a
//! single reverse sweep.
//!
//! ```
//! use translocator_tensor::{Tape, Tensor};
//!
//! let w = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
//! let mut tape = Tape::new();
//! let x = tape.param(&w);
//! let y = tape.mul(x, x).unwrap();
//! let loss = tape.sum(y);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0, 8.0]);
//! ```

mod error;
mod gemm;
mod ops;
mod tape;
mod tensor;

pub use error::TensorError;
pub use ops::gelu_scalar;
pub use tape::{AttentionProbs, Gradients, Tape, Var};
pub use tensor::Tensor;

pub type Result<T, E = TensorError> = std::result::Result<T, E>;
