//! Seeded, splittable random streams.
//!
//! Every stream is a ChaCha8 generator keyed by `(master_seed, run_index)`
//! with the ChaCha stream id selecting the training step. Evaluation uses
//! stream ids counted down from `u64::MAX`, which training never reaches.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct StreamKey {
    pub master_seed: u64,
    pub run_index: u64,
}

impl StreamKey {
    pub fn new(master_seed: u64, run_index: u64) -> Self {
        Self {
            master_seed,
            run_index,
        }
    }

    fn key(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(b"superscale-stream");
        h.update(self.master_seed.to_le_bytes());
        h.update(self.run_index.to_le_bytes());
        h.finalize().into()
    }

    /// Generator for training step `step`.
    pub fn step(&self, step: u64) -> StreamRng {
        let mut rng = ChaCha8Rng::from_seed(self.key());
        rng.set_stream(step);
        rng
    }

    /// Generator for the `k`-th evaluation pass.
    pub fn eval(&self, k: u64) -> StreamRng {
        self.step(u64::MAX - k)
    }

    /// Generator used once for parameter initialization.
    pub fn init(&self) -> StreamRng {
        self.step(u64::MAX / 2)
    }
}

/// Stable 64-bit hash of a byte string, used for per-cell seeds.
pub fn stable_hash(parts: &[&[u8]]) -> u64 {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}
