//! Deterministic random substreams.
//!
//! Every random draw in the crate comes from a stream keyed by the run seed
//! plus a purpose label and integer coordinates (epoch, batch, image...), so
//! results never depend on evaluation order or thread count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

pub fn substream(seed: u64, label: &str, coords: &[u64]) -> Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((label.len() as u64).to_le_bytes());
    h.update(label.as_bytes());
    for c in coords {
        h.update(c.to_le_bytes());
    }
    ChaCha8Rng::from_seed(h.finalize().into())
}
