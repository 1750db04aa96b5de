//! Deterministic seed splitting: one 64-bit run seed fans out into
//! independent per-subsystem, per-index streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Named subsystem streams.
pub mod stream {
    pub const TASKS: u64 = 1;
    pub const ROLLOUTS: u64 = 2;
    pub const EVAL_TASKS: u64 = 3;
    pub const TASK_CONTEXT: u64 = 4;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(base: u64, stream: u64, index: u64) -> u64 {
    splitmix64(splitmix64(splitmix64(base) ^ stream) ^ index)
}

pub fn rng_for(base: u64, stream: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, stream, index))
}
