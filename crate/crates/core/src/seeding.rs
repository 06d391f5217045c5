//! Deterministic seed derivation.
//!
//! Every stochastic stage (frame sampling, augmentation, init, training)
//! owns a ChaCha stream derived from the run seed plus a stable tag, so
//! pipelines are pure functions of (inputs, config, seed).

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; mixes a seed with context tags.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a base seed and an ordered list of tags.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = mix(base);
    for &t in tags {
        s = mix(s ^ t);
    }
    s
}

/// Hash a string into a tag usable with [`derive_seed`].
pub fn tag(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn rng_from(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rng_for(base: u64, name: &str, tags: &[u64]) -> ChaCha8Rng {
    let mut all = vec![tag(name)];
    all.extend_from_slice(tags);
    rng_from(derive_seed(base, &all))
}
