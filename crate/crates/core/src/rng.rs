//! Labeled random substreams.
//!
//! Every consumer of randomness derives its own generator from a master seed
//! and a stable label such as `"detector/sample-17/repeat-2"`. Adding a new
//! consumer never shifts the draws seen by an existing one.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha12Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeedTree {
    master: u64,
}

impl SeedTree {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn stream(&self, label: &str) -> StreamRng {
        StreamRng::from_seed(self.seed_bytes(label))
    }

    /// Child tree whose streams are namespaced under `label`.
    pub fn child(&self, label: &str) -> SeedTree {
        let bytes = self.seed_bytes(label);
        SeedTree {
            master: u64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }

    fn seed_bytes(&self, label: &str) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.master.to_le_bytes());
        h.update((label.len() as u64).to_le_bytes());
        h.update(label.as_bytes());
        h.finalize().into()
    }
}

pub fn standard_normal_vec<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}
