//! Seed derivation for parameter sweeps and per-particle streams.
//!
//! A single master seed fans out into independent child streams through a
//! splitmix64 finalizer on a counter; the mapping is pure, documented, and
//! stable across platforms, so any (n, replica) cell of a sweep can be
//! reproduced in isolation.

/// splitmix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Child seed for stream `stream` of `master`.
pub fn child_seed(master: u64, stream: u64) -> u64 {
    mix(master ^ mix(stream.wrapping_add(1)))
}

/// Child seed for a two-level split, e.g. (n-index, replica).
pub fn grid_seed(master: u64, level: u64, replica: u64) -> u64 {
    child_seed(child_seed(master, level), replica)
}
