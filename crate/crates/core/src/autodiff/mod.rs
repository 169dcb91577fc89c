//! Minimal reverse-mode automatic differentiation and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{rbf_sum, sq_dist, Elementwise, Tape, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
