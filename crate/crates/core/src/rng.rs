//! Deterministic RNG streams.
//!
//! Everything that draws randomness derives its generator from a master seed
//! plus a list of stream tags (loop index, trajectory index, ...). Results
//! are therefore independent of thread count and iteration order: worker `i`
//! always sees the stream for index `i`.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, cheap.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Domain constant so a zero seed still produces a scrambled key.
const DOMAIN: u64 = 0x6164_616e_6174_0001;

/// Derive an independent generator from a master seed and stream tags.
pub fn stream_rng(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut state = mix(seed ^ DOMAIN);
    for (i, &t) in tags.iter().enumerate() {
        state = mix(state ^ mix(t.wrapping_add(i as u64 + 1)));
    }
    let mut key = [0u8; 32];
    for (chunk, word) in key.chunks_mut(8).zip(0u64..) {
        let v = mix(state ^ word);
        chunk.copy_from_slice(&v.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
