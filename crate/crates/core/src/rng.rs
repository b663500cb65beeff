//! Seeded randomness shared by shuffling, initialisation and synthesis.
//!
//! Generator: xoshiro256** whose 256-bit state is filled by four successive
//! outputs of splitmix64 started at the 64-bit seed (the `seed_from_u64`
//! construction of `rand_xoshiro`).
//!
//! Shuffle: Fisher-Yates from the back. For `i = len-1 down to 1`, draw
//! `x = next_u64()` and pick `j = (x * (i + 1)) >> 64` (128-bit product), then
//! swap positions `i` and `j`. The order is therefore a pure function of
//! `(seed, len)` and can be reproduced outside this crate.

use rand::{RngCore, SeedableRng};
use rand_xoshiro::Xoshiro256StarStar;

pub type Rng = Xoshiro256StarStar;

pub fn seeded(seed: u64) -> Rng {
    Xoshiro256StarStar::seed_from_u64(seed)
}

/// splitmix64 finaliser; used to derive independent sub-seeds.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Sub-seed for item `index` of stream `stream` under `seed`.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    mix64(mix64(seed ^ mix64(stream)) ^ index)
}

/// Uniform integer in `0..bound` by 128-bit multiply-shift.
pub fn below(rng: &mut Rng, bound: usize) -> usize {
    debug_assert!(bound > 0);
    ((rng.next_u64() as u128 * bound as u128) >> 64) as usize
}

pub fn shuffle<T>(items: &mut [T], rng: &mut Rng) {
    for i in (1..items.len()).rev() {
        let j = below(rng, i + 1);
        items.swap(i, j);
    }
}

/// Visiting order `0..len`, shuffled when a seed is given.
pub fn epoch_order(len: usize, seed: Option<u64>) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = seed {
        shuffle(&mut order, &mut seeded(seed));
    }
    order
}
