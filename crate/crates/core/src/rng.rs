//! Every random draw in the crate comes from one generator family:
//! xoshiro256++ seeded through `seed_from_u64` (SplitMix64 expansion).

use rand::SeedableRng;
use rand_xoshiro::Xoshiro256PlusPlus;

pub type Rng = Xoshiro256PlusPlus;

/// Environment variable that overrides configured seeds in the CLI.
pub const SEED_ENV: &str = "PHONEBENCH_SEED";

pub fn seeded(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}

/// An independent stream for a sub-task (initialization, batching, augmentation).
pub fn stream(seed: u64, tag: u64) -> Rng {
    Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17))
}
