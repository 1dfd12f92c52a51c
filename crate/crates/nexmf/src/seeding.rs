//! Deterministic derivation of child seeds.
//!
//! Anything that runs concurrently (sweep points, solver restarts) draws its
//! randomness from a child seed computed here, so results never depend on
//! scheduling order or thread count.

/// Derives a child seed from a base seed and a task index using the
/// splitmix64 finalizer. Not cryptographic; the goal is decorrelation of
/// nearby indices, stable across platforms.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
