//! Deterministic random-stream derivation.
//!
//! Every source of randomness in the toolkit is a named stream derived from
//! the single global seed. Streams are independent of one another, so
//! enabling or disabling a feature (augmentation, look-ahead, trigger
//! mining) never shifts the draws another feature sees. That is what makes
//! run-to-run and config-to-config reproducibility claims testable.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// FNV-1a over the tag bytes; stable across platforms and builds.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// splitmix64 finalizer, used to decorrelate combined seed material.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive the RNG for stream `tag` with positional `salt` (epoch, batch,
/// sample indices and the like) from the global `seed`.
pub fn stream(seed: u64, tag: &str, salt: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed ^ fnv1a(tag.as_bytes()));
    for &s in salt {
        state = mix(state ^ s);
    }
    ChaCha8Rng::seed_from_u64(state)
}

/// Stable 64-bit hash of a token string, for per-token embedding streams.
pub fn token_hash(token: &str) -> u64 {
    fnv1a(token.as_bytes())
}
