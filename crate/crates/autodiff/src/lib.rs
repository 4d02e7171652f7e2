//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Build a fresh [`Tape`] per forward pass, record operations through [`Var`]
//! handles, then call [`Tape::backward`] on a scalar node to obtain
//! [`Gradients`] for every leaf.
//!
//! ```
//! use elicit_autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::scalar(3.0));
//! let loss = x.square();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.wrt(x).item(), Some(6.0));
//! ```

mod error;
mod kernels;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use tape::{Gradients, NodeId, Tape, Var};
pub use tensor::Tensor;
