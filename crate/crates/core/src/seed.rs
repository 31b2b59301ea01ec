//! Seed derivation.
//!
//! Every random stream is derived from one root seed:
//!
//! ```text
//! derive(root, label, [i0, i1, ...]) =
//!     s = splitmix64(root ^ fnv1a64(label));
//!     for i in indices { s = splitmix64(s ^ i) }
//! ```
//!
//! The labels in use are `"data"`, `"init"`, `"train"` and `"sampling"`, so each
//! subsystem can be reproduced without replaying the others. Indices let a stream
//! be keyed by (epoch, step, item) without any shared mutable state.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const DATA: &str = "data";
pub const INIT: &str = "init";
pub const TRAIN: &str = "train";
pub const SAMPLING: &str = "sampling";

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn fnv1a64(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub fn derive(root: u64, label: &str, indices: &[u64]) -> u64 {
    indices
        .iter()
        .fold(splitmix64(root ^ fnv1a64(label)), |s, &i| splitmix64(s ^ i))
}

pub fn rng(root: u64, label: &str, indices: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive(root, label, indices))
}
