//! Deterministic random streams.
//!
//! Every consumer of randomness asks for a stream keyed by the experiment seed,
//! a purpose label and an index (usually a client id). Streams are ChaCha8
//! instances, which are counter based, so two streams never share state and
//! the order in which workers draw from them cannot change any result.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(label: &str) -> u64 {
    label
        .bytes()
        .fold(FNV_OFFSET, |h, b| (h ^ b as u64).wrapping_mul(FNV_PRIME))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent stream for `(seed, purpose, index)`.
pub fn stream(seed: u64, purpose: &str, index: u64) -> Stream {
    let key = splitmix(seed ^ splitmix(fnv1a(purpose)));
    let mut rng = ChaCha8Rng::seed_from_u64(key);
    rng.set_stream(index);
    rng
}

/// Derive a child seed, for handing a sub-experiment its own seed space.
pub fn derive_seed(seed: u64, purpose: &str, index: u64) -> u64 {
    splitmix(splitmix(seed ^ fnv1a(purpose)) ^ index)
}
