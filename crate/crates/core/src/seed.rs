//! Seed derivation. Every random stream in the simulator is keyed by the
//! master seed plus a short path of integers (client id, round, purpose...).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed path into one 64-bit value.
pub fn derive(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_F00D_u64, |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub fn rng(parts: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(parts))
}

// purpose tags, kept distinct so streams never collide
pub(crate) const GEOMETRY: u64 = 1;
pub(crate) const APPEARANCE: u64 = 2;
pub(crate) const INIT: u64 = 3;
pub(crate) const UPLOAD: u64 = 4;
pub(crate) const CLIENT: u64 = 5;
pub(crate) const SERVER: u64 = 6;
pub(crate) const SELECT: u64 = 7;
pub(crate) const PROBE: u64 = 8;
pub(crate) const DATA: u64 = 9;
pub(crate) const EXPORT: u64 = 10;
