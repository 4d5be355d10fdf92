//! Seeded random streams.
//!
//! Every stochastic choice in a run draws from a ChaCha8 stream derived from the
//! run seed plus a fixed per-purpose offset, so each purpose is reproducible on
//! its own regardless of how much randomness the others consume.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// What a derived stream is used for. The discriminant is the seed offset.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    WeightInit = 1,
    Mask = 2,
    Shuffle = 3,
    Augment = 4,
    Probe = 5,
}

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// Stream for `purpose` under run seed `seed`.
pub fn derive(seed: u64, purpose: Stream) -> Rng {
    // Spread run seeds apart so seed s and s+1 never share a stream.
    seeded(
        seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(purpose as u64),
    )
}
