use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic RNG used everywhere in the crate.
pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Derives an independent named RNG stream from a root seed.
///
/// Every random decision in an experiment draws from its own stream, keyed by
/// a purpose label plus integer coordinates (round, device, seed index, ...).
/// Streams never share state, so skipping one stage of a run (for example
/// distillation) cannot shift the draws of any other stage.
pub fn stream(root: u64, label: &str, coords: &[u64]) -> Rng {
    let mut state = splitmix(root ^ fnv1a(label.as_bytes()));
    for &c in coords {
        state = splitmix(state ^ splitmix(c.wrapping_add(0x5851_f42d_4c95_7f2d)));
    }
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_exact_mut(8) {
        state = splitmix(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    Rng::from_seed(seed)
}
