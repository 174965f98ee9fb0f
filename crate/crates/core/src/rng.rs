//! Deterministic named random substreams derived from one master seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Substream names used by the drivers.
pub mod streams {
    pub const PRIOR_DRAWS: &str = "prior-draws";
    pub const NOISE: &str = "noise";
    pub const PROBES: &str = "probes";
    pub const RANDOM_DESIGNS: &str = "random-designs";
    pub const EVAL_PRIOR_DRAWS: &str = "eval-prior-draws";
    pub const EVAL_NOISE: &str = "eval-noise";
    pub const TRUTH_NOISE: &str = "truth-noise";
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a(name: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Generator for substream `name`, member `index`, of `master`.
pub fn substream(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut state = master ^ fnv1a(name).rotate_left(17) ^ index.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

pub fn standard_normal_vec<R: rand::Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
