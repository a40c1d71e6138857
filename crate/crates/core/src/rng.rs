//! Seed derivation. Every subsystem draws from its own stream so that
//! changing how one subsystem consumes randomness never shifts another's.
//!
//! `derive_seed(root, label) = splitmix64(root ^ fnv1a64(label))`

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const STREAM_INIT: &str = "init";
pub const STREAM_SHUFFLE: &str = "shuffle";
pub const STREAM_PLAN: &str = "plan";
pub const STREAM_DROPOUT: &str = "dropout";
pub const STREAM_MASK: &str = "mask";
pub const STREAM_SYNTH: &str = "synth";

fn fnv1a64(label: &str) -> u64 {
    label.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, label: &str) -> u64 {
    splitmix64(root ^ fnv1a64(label))
}

pub fn stream(root: u64, label: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, label))
}
