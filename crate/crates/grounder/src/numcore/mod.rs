//! Minimal dense-matrix kernel with reverse-mode automatic differentiation.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::fd_check;
pub use matrix::{kl_rows, Matrix};
pub use tape::{Gradients, NodeId, Tape};
