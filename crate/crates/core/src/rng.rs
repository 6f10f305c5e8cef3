//! Seed fan-out.
//!
//! A run has exactly one user-visible seed. Every consumer of randomness
//! derives its own stream as `ChaCha8Rng::seed_from_u64(derive_seed(seed, label))`
//! where `label` names the consumer, e.g. `"init/cur.fwd.w"`, `"embed"`,
//! `"shuffle"`, `"synth"` or `"bootstrap"`. The label is hashed with 64-bit
//! FNV-1a, xored into the seed and finalised with the SplitMix64 mixer, so
//! adding or removing one consumer never perturbs the others.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn fnv1a(label: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in label.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(seed: u64, label: &str) -> u64 {
    splitmix64(seed ^ fnv1a(label))
}

pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, label))
}
