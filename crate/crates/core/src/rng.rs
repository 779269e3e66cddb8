//! Counter-based random streams.
//!
//! Every random draw in the crate comes from a ChaCha8 stream keyed by a
//! seed and a short list of integer ids (trajectory index, bounce index,
//! ...). Results therefore do not depend on scheduling or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream for `(seed, ids...)`.
pub fn stream(seed: u64, ids: &[u64]) -> ChaCha8Rng {
    let mut state = seed ^ 0x6A09_E667_F3BC_C909;
    for &id in ids {
        state = splitmix64(&mut state) ^ id.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    }
    let mut key = [0u8; 32];
    for chunk in key.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
