#![allow(clippy::neg_cmp_op_on_partial_ord)]
//! Class-conditional distribution augmentation for domain generalization.
//!
//! Instances from the same (domain, class) cell are summarized as a diagonal
//! Gaussian. A kernel classifier over those Gaussians, a distribution-level
//! Universum used to synthesize new cells, and a distribution mixup term
//! regularize an ordinary encoder + classifier during training.

pub mod augment;
pub mod autodiff;
pub mod data;
pub mod error;
pub mod kernel;
pub mod nn;
pub mod rng;
pub mod stats;
pub mod training;

pub use error::{Error, Result};
