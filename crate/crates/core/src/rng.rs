//! Keyed random streams.
//!
//! Every stochastic step (dataset synthesis, initialization, clustering seeds,
//! episode sampling, prior draws) pulls from its own ChaCha stream derived from
//! the run seed and a tuple of integer keys, so a run is reproducible no matter
//! in which order the streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Named stream families.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Stream {
    Dataset = 1,
    Init = 2,
    Reference = 3,
    Clustering = 4,
    Episode = 5,
    Prior = 6,
    Split = 7,
    RandomDomains = 8,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a list of keys into a single 64-bit stream seed.
pub fn derive_seed(seed: u64, keys: &[u64]) -> u64 {
    keys.iter()
        .fold(splitmix64(seed), |acc, &k| splitmix64(acc ^ splitmix64(k)))
}

pub fn stream(seed: u64, kind: Stream, keys: &[u64]) -> StreamRng {
    let mut all = Vec::with_capacity(keys.len() + 1);
    all.push(kind as u64);
    all.extend_from_slice(keys);
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &all))
}
