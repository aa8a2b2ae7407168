//! Seed derivation. All randomness flows from one root seed through named
//! substreams so partial re-runs stay stable.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for the named stage `name` under `root`.
pub fn substream(root: u64, name: &str) -> u64 {
    // FNV-1a over the name, then mixed with the root
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(root ^ splitmix(h))
}

/// Seed for case `case_id` of a stream rooted at `seed`.
pub fn case_stream(seed: u64, case_id: u64) -> u64 {
    splitmix(splitmix(seed) ^ case_id.wrapping_mul(0xD1B5_4A32_D192_ED03))
}

pub fn rng(seed: u64) -> Rng {
    Rng::seed_from_u64(seed)
}
