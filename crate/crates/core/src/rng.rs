//! Named random substreams derived from one root seed.
//!
//! Every stochastic component pulls its generator from here, so a component
//! can be re-run on its own and still see the same numbers it saw inside a
//! full experiment.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type SimRng = ChaCha8Rng;

/// Generator for `(root, name, index...)`. Distinct names or indices give
/// statistically independent streams.
pub fn substream(root: u64, name: &str, index: &[u64]) -> SimRng {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    hasher.update((name.len() as u64).to_le_bytes());
    hasher.update(name.as_bytes());
    for i in index {
        hasher.update(i.to_le_bytes());
    }
    let seed: [u8; 32] = hasher.finalize().into();
    ChaCha8Rng::from_seed(seed)
}
