//! Seeded random streams. Every consumer derives its own stream from a
//! base seed and a label, so adding a consumer never shifts another's draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type Stream = ChaCha8Rng;

/// A stream keyed by `(seed, label)`.
pub fn stream(seed: u64, label: &str) -> Stream {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(label.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// A stream keyed by `(seed, label, index)`, e.g. one per training step.
pub fn indexed(seed: u64, label: &str, index: u64) -> Stream {
    stream(seed, &format!("{label}#{index}"))
}

pub fn standard_normal(rng: &mut impl Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal) as f32).collect()
}
