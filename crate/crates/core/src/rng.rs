//! Counter-based seed derivation.
//!
//! Every random stream in an experiment is keyed by
//! `(master seed, purpose, worker, round)` and hashed with SplitMix64 into the
//! seed of an independent ChaCha8 generator. Streams therefore do not depend
//! on the order in which workers are scheduled.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    ModelInit = 1,
    WorkerData = 2,
    TrainNoise = 3,
    PseudoInput = 4,
    Reference = 5,
    Truth = 6,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn sub_seed(master: u64, purpose: Purpose, worker: u64, round: u64) -> u64 {
    let mut h = splitmix64(master);
    for word in [purpose as u64, worker, round] {
        h = splitmix64(h ^ word);
    }
    h
}

pub fn stream(master: u64, purpose: Purpose, worker: u64, round: u64) -> Rng {
    Rng::seed_from_u64(sub_seed(master, purpose, worker, round))
}
