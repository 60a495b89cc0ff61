//! Seeded random streams.
//!
//! All randomness flows from one root seed. Named substreams (`"data"`,
//! `"init"`, `"augment"`, ...) are derived by hashing the name into the seed,
//! and per-item streams use ChaCha stream ids.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Tensor;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn substream_seed(root: u64, name: &str) -> u64 {
    // FNV-1a over the name, mixed with the root seed
    let h = name
        .bytes()
        .fold(0xcbf2_9ce4_8422_2325u64, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3));
    splitmix(root ^ splitmix(h))
}

pub fn substream(root: u64, name: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(substream_seed(root, name))
}

/// Stream `index` of the named substream.
pub fn item_stream(root: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut rng = substream(root, name);
    rng.set_stream(index);
    rng
}

/// Trainable tensor with i.i.d. `N(0, std²)` entries.
pub fn normal_param(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::param((0..n).map(|_| normal.sample(rng)).collect(), shape).expect("nonzero shape")
}
