//! Encoder, instance classifier and the joint instance/distribution training
//! loop.
//!
//! Each step encodes a domain-balanced batch, summarizes every (domain, class)
//! cell as a Gaussian, refreshes the momentum bank, synthesizes new cells by
//! mixing with the Universum, and optimizes
//! `L_total = L_ins + beta * L_dis` with Adam.

mod config;
mod loss;
mod model;
mod trainer;

pub use config::TrainConfig;
pub use loss::{distribution_loss, instance_loss, one_hot, DistTerm, PseudoBatch};
pub use model::{argmax, BoundModel, EncoderModel, ModelDims};
pub use trainer::{
    evaluate, fit, fit_split, FitResult, Instances, TrainData, TrainRecord, Trainer, CHECKPOINT_VERSION,
};
