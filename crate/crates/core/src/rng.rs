//! Named, reproducible random substreams.
//!
//! Every sampling site draws from its own substream, derived from the master
//! seed and a list of name parts (problem id, replicate, stage). Substreams
//! are independent of evaluation order, so disjoint problems can be rolled
//! in parallel and still produce bit-identical output.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Derives deterministic [`ChaCha12Rng`] substreams from a master seed.
#[derive(Debug, Clone, Copy)]
pub struct RngFactory {
    master: u64,
}

impl RngFactory {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master_seed(&self) -> u64 {
        self.master
    }

    /// Substream named by `parts`. The seed is a hash of the master seed and
    /// the parts, so distinct names never collide with each other in practice
    /// and the same name always yields the same stream.
    pub fn stream(&self, parts: &[&str]) -> ChaCha12Rng {
        let mut hasher = Sha256::new();
        hasher.update(self.master.to_le_bytes());
        for part in parts {
            hasher.update((part.len() as u64).to_le_bytes());
            hasher.update(part.as_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha12Rng::from_seed(seed)
    }

    /// Convenience for the common (problem, replicate, stage) shape.
    pub fn problem_stream(&self, problem_id: &str, replicate: usize, stage: &str) -> ChaCha12Rng {
        let rep = replicate.to_string();
        self.stream(&[problem_id, &rep, stage])
    }
}
