//! Hierarchical deterministic RNG streams.
//!
//! Every random draw in the crate flows from a single root seed through a
//! tree of labeled children. Each node owns an independent ChaCha stream, so
//! adding a consumer (an extra turn, an extra branch) never perturbs the
//! draws of its siblings.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A node in the seed tree. Cheap to clone; children are derived by hashing
/// the parent state with a label, so derivation order does not matter.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedTree {
    state: [u8; 32],
}

impl SeedTree {
    pub fn from_root(seed: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(b"navigator-seed-root");
        hasher.update(seed.to_le_bytes());
        Self {
            state: hasher.finalize().into(),
        }
    }

    /// Derive a child stream for a named purpose.
    pub fn child(&self, label: &str) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(self.state);
        hasher.update([label.len() as u8]);
        hasher.update(label.as_bytes());
        Self {
            state: hasher.finalize().into(),
        }
    }

    /// Derive an indexed child stream (per turn, per rollout, ...).
    pub fn child_idx(&self, label: &str, idx: u64) -> Self {
        let mut hasher = Sha256::new();
        hasher.update(self.state);
        hasher.update([label.len() as u8]);
        hasher.update(label.as_bytes());
        hasher.update(idx.to_le_bytes());
        Self {
            state: hasher.finalize().into(),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.state)
    }
}
