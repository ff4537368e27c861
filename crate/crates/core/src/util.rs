use std::hash::Hasher;

use fnv::FnvHasher;

/// Stable 64-bit FNV-1a hash of a string.
pub fn stable_hash(s: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(s.as_bytes());
    h.finish()
}

/// Mixes a base seed with a label into an independent stream seed.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    // splitmix64 finalizer over the combined value
    let mut z = seed ^ stable_hash(label).rotate_left(17);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
