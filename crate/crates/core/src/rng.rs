//! Seed derivation for independent, reproducible RNG streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of stream identifiers into a new seed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix(base), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn stream(base: u64, path: &[u64]) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(base, path))
}

/// Stream tags, kept distinct so that changing one consumer never shifts another.
pub mod tags {
    pub const EPISODE: u64 = 1;
    pub const INIT: u64 = 2;
    pub const EXPAND: u64 = 3;
    pub const INNER: u64 = 4;
    pub const ROT_HEAD: u64 = 5;
    pub const EVAL: u64 = 6;
    pub const VALIDATION: u64 = 7;
    pub const SYNTH_GEOMETRY: u64 = 8;
    pub const SYNTH_TEXTURE: u64 = 9;
}
