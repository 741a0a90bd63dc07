//! Seeded randomness with named substreams.
//!
//! Every run owns a single `u64` seed; each consumer (world generation,
//! noise draws, span sampling, …) derives its own decorrelated stream by
//! name, so adding a new consumer never perturbs the draws of existing ones.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::Tensor;

/// Derive the named substream of `seed`. Streams with different names are
/// independent ChaCha streams of the same seeded generator.
pub fn substream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

/// FNV-1a, used for stable name → stream-id and config fingerprints.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Tensor with i.i.d. uniform entries in `[lo, hi)`.
pub fn uniform_tensor(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("finite uniform draw")
}

/// Tensor with i.i.d. normal entries.
pub fn normal_tensor(rng: &mut impl Rng, shape: &[usize], mean: f64, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            mean + std * z
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("finite normal draw")
}
