//! Seed derivation tree.
//!
//! Every random stream in the crate is a `ChaCha8Rng` keyed by a `u64`
//! derived from the master seed through a chain of labelled splits
//! (experiment -> repeat -> subject). Derivation is a pure function of the
//! parent seed and the child index, so work can be scheduled in any order
//! (or in parallel) and still reproduce bit-for-bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed `index` of `parent`.
pub fn derive(parent: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent) ^ splitmix64(index.wrapping_add(0xA076_1D64_78BD_642F)))
}

/// Child seed keyed by a string label, for named branches of the tree.
pub fn derive_named(parent: u64, label: &str) -> u64 {
    // FNV-1a over the label
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    derive(parent, h)
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Draw a fresh child seed from an existing stream.
pub fn fork(rng: &mut Rng) -> u64 {
    use rand::RngCore;
    rng.next_u64()
}
