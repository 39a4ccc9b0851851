//! Deterministic RNG streams.
//!
//! Every stochastic component draws from a ChaCha8 stream whose 256-bit seed
//! is derived by hashing a global seed together with a stream label and
//! integer coordinates (epoch, episode index, ...). Results are therefore
//! independent of worker scheduling: the stream for (seed, "rollout", epoch,
//! episode) is the same no matter which thread runs it.

use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

pub type Rng = rand_chacha::ChaCha8Rng;

/// Derive an independent RNG stream from `(global_seed, label, parts...)`.
pub fn stream(global_seed: u64, label: &str, parts: &[u64]) -> Rng {
    let mut h = Sha256::new();
    h.update(global_seed.to_le_bytes());
    h.update([0xff]);
    h.update(label.as_bytes());
    for p in parts {
        h.update([0xfe]);
        h.update(p.to_le_bytes());
    }
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    Rng::from_seed(seed)
}

/// Standard-normal draw; `rand_distr::StandardNormal` wrapper kept in one
/// place so every module samples identically.
pub fn normal(rng: &mut Rng) -> f64 {
    use rand_distr::Distribution;
    rand_distr::StandardNormal.sample(rng)
}

/// Uniform draw on the half-open interval (0, 1] (never exactly zero).
pub fn uniform_open_closed(rng: &mut Rng) -> f64 {
    use rand::Rng as _;
    1.0 - rng.random::<f64>()
}
