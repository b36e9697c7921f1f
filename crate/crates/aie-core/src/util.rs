//! Small internal helpers: stable hashing and seed derivation.

/// FNV-1a over bytes. Stable across platforms and releases, used for the
/// hash encoding policy and for deriving per-name RNG seeds.
pub(crate) fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
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

/// Derives an independent stream seed from a base seed and an index, so
/// per-item randomness does not depend on iteration order.
pub(crate) fn derive_seed(base: u64, index: u64) -> u64 {
    splitmix64(base ^ splitmix64(index))
}

/// Derives a seed from a base seed and a label (e.g. a parameter name).
pub(crate) fn derive_seed_str(base: u64, label: &str) -> u64 {
    derive_seed(base, fnv1a64(label.as_bytes()))
}
