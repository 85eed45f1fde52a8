//! Keyed random streams.
//!
//! Every random draw in the crate comes from a ChaCha stream whose seed is a
//! hash of `(root seed, purpose, indices)`. Draws therefore depend on what
//! they are for, never on the order in which workers request them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn fnv(tag: &str) -> u64 {
    tag.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3)
    })
}

pub fn derive_seed(root: u64, tag: &str, indices: &[u64]) -> u64 {
    let mut h = splitmix(root ^ fnv(tag));
    for &i in indices {
        h = splitmix(h ^ splitmix(i));
    }
    h
}

pub fn keyed_rng(root: u64, tag: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag, indices))
}
