//! Seed derivation for every stochastic draw in a run.
//!
//! A run is driven by one `u64` seed. Each consumer (weight init, dropout,
//! data synthesis, fold shuffling, ...) asks for its own stream by label and
//! index, so adding a new consumer never shifts the draws of existing ones.
//! Streams are ChaCha8, a counter-based generator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type RunRng = ChaCha8Rng;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
fn label_hash(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Child seed for the stream `(label, index)` under `seed`.
pub fn derive_seed(seed: u64, label: &str, index: u64) -> u64 {
    let h = splitmix64(seed ^ splitmix64(label_hash(label)));
    splitmix64(h ^ splitmix64(index.wrapping_add(0x632B_E59B_D9B4_E019)))
}

pub fn stream(seed: u64, label: &str, index: u64) -> RunRng {
    RunRng::seed_from_u64(derive_seed(seed, label, index))
}
