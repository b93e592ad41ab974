//! Named random streams derived from one master seed.
//!
//! Every consumer of randomness asks for a stream by name and index, so
//! adding a new consumer never shifts the numbers another one sees.

use std::hash::Hasher;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::predictors::Fnv64;

/// Seed for stream `name` number `index` under `master`.
pub fn derive_seed(master: u64, name: &str, index: u64) -> u64 {
    let mut h = Fnv64::default();
    h.write(&master.to_le_bytes());
    h.write(name.as_bytes());
    h.write(&[0xff]);
    h.write(&index.to_le_bytes());
    // splitmix64 finaliser spreads FNV's weak low bits
    let mut z = h.finish().wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn stream(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, name, index))
}
