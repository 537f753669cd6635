//! Named, reproducible random sub-streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Each consumer of randomness gets its own tag so adding draws
/// in one place never shifts another.
pub mod tag {
    pub const MODEL_INIT: u64 = 1;
    pub const PARTITION: u64 = 2;
    pub const SELECT: u64 = 3;
    pub const CLIENT: u64 = 4;
    pub const FEEDBACK: u64 = 5;
    pub const DATA: u64 = 6;
    pub const SPLIT: u64 = 7;
    pub const GRADCHECK: u64 = 8;
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Mixes a root seed with a path of tags into a new seed.
pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

pub fn stream(root: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, path))
}
