//! Keyed random substreams.
//!
//! Every stream is a ChaCha8 generator whose key is `(seed, purpose)` and
//! whose stream id is the entity index (user id, bootstrap replicate, ...).
//! Streams are independent of each other and of the order in which they are
//! consumed, so work can be split across threads without changing results.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What a substream is used for. Distinct purposes never share key material.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum Purpose {
    Embeddings = 1,
    UserOrganic = 2,
    UserAction = 3,
    UserClick = 4,
    Bootstrap = 5,
    Derive = 6,
}

pub fn substream(seed: u64, purpose: Purpose, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(purpose as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(index);
    rng
}

/// Derives a child seed from `(seed, tag)`; used to give each experiment cell
/// its own training and evaluation populations.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    use rand::RngCore;
    substream(seed, Purpose::Derive, tag).next_u64()
}
