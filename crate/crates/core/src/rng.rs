//! Seed derivation. Every random draw in the crate flows from an explicit
//! `u64` seed through one of these helpers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

/// Independent generator for `(seed, stream)`.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Child seed named by a label, e.g. `derive_seed(master, "codec/0.5")`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn normal_vec(rng: &mut impl rand::Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| Distribution::<f32>::sample(&StandardNormal, rng)).collect()
}
