//! Dense matrices and reverse-mode differentiation.

mod matrix;
mod tape;

pub use matrix::{softmax_xent, Matrix};
pub use tape::{Gradients, NodeId, Tape};
