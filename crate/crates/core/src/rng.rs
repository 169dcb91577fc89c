//! Seeded, purpose-split random streams.
//!
//! Each consumer draws from its own ChaCha stream so that switching a
//! component on or off never perturbs the draws seen by the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Stream ids for [`stream`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    InitBackbone = 1,
    InitAux = 2,
    Batch = 3,
    DistMixup = 4,
    Resample = 5,
    InputMixup = 6,
    Data = 7,
    Split = 8,
}

pub fn stream(seed: u64, purpose: Purpose) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose as u64);
    rng
}

/// The streams consumed during training, checkpointed with the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainStreams {
    pub batch: ChaCha8Rng,
    pub dist_mixup: ChaCha8Rng,
    pub resample: ChaCha8Rng,
    pub input_mixup: ChaCha8Rng,
}

impl TrainStreams {
    pub fn new(seed: u64) -> Self {
        TrainStreams {
            batch: stream(seed, Purpose::Batch),
            dist_mixup: stream(seed, Purpose::DistMixup),
            resample: stream(seed, Purpose::Resample),
            input_mixup: stream(seed, Purpose::InputMixup),
        }
    }
}
