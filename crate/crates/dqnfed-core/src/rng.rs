//! Seed derivation. One master seed expands into independent named
//! streams so that, for example, adding rounds to a run never perturbs
//! partitioning or earlier rounds.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream tags. Each (tag, indices...) path gets its own generator.
pub const STREAM_DATASET: u64 = 1;
pub const STREAM_PARTITION: u64 = 2;
pub const STREAM_INIT: u64 = 3;
pub const STREAM_SPLIT: u64 = 4;
pub const STREAM_SAMPLING: u64 = 5;
pub const STREAM_CLIENT: u64 = 6;

// splitmix64 finalizer; the standard seed mixer from Steele et al.,
// "Fast Splittable Pseudorandom Number Generators" (OOPSLA 2014).
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Derives a child seed by folding each path component through the
/// mixer. Distinct paths give unrelated seeds; the empty path gives a
/// mixed copy of the master seed itself.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut state = splitmix64(master);
    for &p in path {
        state = splitmix64(state ^ p.wrapping_mul(0x9E3779B97F4A7C15));
    }
    state
}

/// Generator for one named stream.
pub fn stream_rng(master: u64, path: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, path))
}
