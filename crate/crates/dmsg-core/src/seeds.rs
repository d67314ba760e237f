//! Deterministic seed derivation.
//!
//! Every randomized component (splits, parameter init, sampling noise) draws
//! from its own stream derived from the master seed and a label, so adding
//! or removing one consumer never shifts the draws of another. The mixing is
//! FNV-1a over the label followed by splitmix64 — nothing here depends on
//! process state, so derived seeds are stable across runs and platforms.

/// Derives an independent stream seed from a master seed and a label.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for byte in label.as_bytes() {
        h ^= u64::from(*byte);
        h = h.wrapping_mul(0x100000001b3);
    }
    splitmix64(master ^ h)
}

/// Like [`derive_seed`], additionally keyed by an index (task number,
/// epoch, class id, ...).
pub fn derive_seed_indexed(master: u64, label: &str, index: u64) -> u64 {
    splitmix64(derive_seed(master, label) ^ splitmix64(index.wrapping_add(0x9e3779b97f4a7c15)))
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}
