//! Deterministic derivation of independent RNG streams from a master seed.
//!
//! Every randomized stage (init, shuffling, noise, estimator shuffles,
//! codebook) draws from its own stream keyed by a purpose tag and an index,
//! so reordering or parallelizing stages never perturbs another stage's
//! randomness.

/// Derive a stream seed from `base`, a purpose tag, and an index.
pub fn derive(base: u64, tag: &str, idx: u64) -> u64 {
    // FNV-1a over the tag, then splitmix64 finalization.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in tag.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    let mut z = base ^ h ^ idx.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}
