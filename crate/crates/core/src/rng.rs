//! Deterministic, labeled random streams.
//!
//! Every random draw in the crate comes from a stream addressed by a seed and a
//! path of labels and indices (`"restart" 3 / "round" 0 / "bootstrap" 7`). Two
//! plans with the same address always produce the same draws, regardless of
//! which thread or in which order they are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const BOOTSTRAP: &str = "bootstrap";
pub const PERMUTATION: &str = "permutation";
pub const SIMULATION: &str = "simulation";
pub const SPLIT: &str = "split";
pub const FOLDS: &str = "folds";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(mut hash: u64, bytes: &[u8]) -> u64 {
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(FNV_PRIME);
    }
    hash
}

/// A seed plus a path identifying one random substream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngPlan {
    seed: u64,
    path: Vec<(String, u64)>,
}

impl RngPlan {
    pub fn new(seed: u64) -> Self {
        RngPlan {
            seed,
            path: Vec::new(),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child plan addressed by `label` and `index`.
    pub fn substream(&self, label: &str, index: u64) -> RngPlan {
        let mut path = self.path.clone();
        path.push((label.to_string(), index));
        RngPlan {
            seed: self.seed,
            path,
        }
    }

    fn stream_id(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for (label, index) in &self.path {
            h = fnv1a(h, label.as_bytes());
            h = fnv1a(h, &[0xff]);
            h = fnv1a(h, &index.to_le_bytes());
        }
        h
    }

    /// Fresh generator positioned at the start of this plan's stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id());
        rng
    }
}
