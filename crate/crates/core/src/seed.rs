//! Counter-based seeding.
//!
//! Every random draw in the crate comes from a ChaCha8 generator keyed by the
//! user seed and positioned on a stream derived from `(stream, index)`. Work
//! can therefore be split across threads in any way without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Well-known stream identifiers.
pub mod streams {
    pub const TRAINING: u64 = 1;
    pub const TEST: u64 = 2;
    pub const NOISE: u64 = 3;
    pub const SAMPLING: u64 = 4;
    pub const REFERENCE: u64 = 5;
    pub const ROTATION: u64 = 6;
    pub const SPECTRUM: u64 = 7;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for substream `(stream, index)` of `seed`.
pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(splitmix64(splitmix64(stream) ^ index));
    rng
}

/// Derive a child seed, e.g. one per sweep cell.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    splitmix64(seed ^ splitmix64(stream.wrapping_mul(0xA24B_AED4_963E_E407) ^ index))
}
