//! Dense matrix math, symmetric eigendecomposition, and the reverse-mode
//! tape the training loop runs on.

mod eig;
mod matrix;
mod tape;

pub use eig::{singular_values, sqrtm_psd, sym_eig};
pub use matrix::{Matrix, Scalar};
pub use tape::{Gradients, NodeId, Tape};
