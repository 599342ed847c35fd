//! Counter-style random streams.
//!
//! Every stream is a ChaCha8 generator whose 256-bit key is the
//! little-endian concatenation of `(seed, domain, a, b)`. A draw therefore
//! depends only on its coordinates, never on how many other draws happened
//! before it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Identifier recorded alongside generated artifacts.
pub const RNG_SCHEME: &str = "chacha8-key(seed,domain,a,b)/v1";

pub const DOMAIN_WORLD: u64 = 1;
pub const DOMAIN_SAMPLE: u64 = 2;
pub const DOMAIN_INIT: u64 = 3;
pub const DOMAIN_SHUFFLE: u64 = 4;

pub fn stream(seed: u64, domain: u64, a: u64, b: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_exact_mut(8).zip([seed, domain, a, b]) {
        chunk.copy_from_slice(&word.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Derives a named sub-seed (FNV-1a over the name, mixed with the parent).
pub fn sub_seed(parent: u64, name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ parent.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in name.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}
