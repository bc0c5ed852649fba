//! Seeded random streams.
//!
//! All randomness flows from ChaCha8 generators. Independent sub-streams are
//! derived from a master seed with [`stream`]: the generator is seeded by
//! `seed_from_u64(master)` and its 64-bit ChaCha stream id is set to the
//! sub-stream index, so stream `i` of master `m` is identical on every
//! platform and never overlaps another stream of the same master.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Sub-stream `index` of `master`.
pub fn stream(master: u64, index: u64) -> Rng {
    let mut r = ChaCha8Rng::seed_from_u64(master);
    r.set_stream(index);
    r
}

pub fn normal_vec(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}
