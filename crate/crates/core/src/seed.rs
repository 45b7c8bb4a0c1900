//! Deterministic random streams.
//!
//! Every random draw in the crate comes from a stream obtained by splitting
//! the master seed with a `(label, index)` pair:
//!
//! ```text
//!     stream_seed = SHA-256(master_le || len(label)_le || label || index_le)[0..32]
//! ```
//!
//! The 32-byte digest seeds a ChaCha8 generator. Work is always partitioned
//! into fixed, index-addressed units (one trajectory, or one chunk of
//! [`CHUNK`] samples), so results do not depend on how many worker threads
//! pick those units up.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

/// Fixed sample-chunk size for embarrassingly parallel sampling.
pub const CHUNK: usize = 4096;

pub fn derive_seed(master: u64, label: &str, index: u64) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((label.len() as u64).to_le_bytes());
    hasher.update(label.as_bytes());
    hasher.update(index.to_le_bytes());
    hasher.finalize().into()
}

pub fn stream(master: u64, label: &str, index: u64) -> StreamRng {
    ChaCha8Rng::from_seed(derive_seed(master, label, index))
}

/// A derived master seed, for handing a whole sub-experiment its own streams.
pub fn sub_seed(master: u64, label: &str, index: u64) -> u64 {
    let d = derive_seed(master, label, index);
    u64::from_le_bytes(d[..8].try_into().expect("digest holds 8 bytes"))
}

/// Maps `f` over `0..n` in parallel and returns results in index order.
pub fn par_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

/// Draws `n` items in chunks of [`CHUNK`], each chunk from its own stream.
pub fn par_chunked<T, F>(n: usize, master: u64, label: &str, draw: F) -> Vec<T>
where
    T: Send,
    F: Fn(&mut StreamRng) -> T + Sync + Send,
{
    let chunks = n.div_ceil(CHUNK);
    let parts: Vec<Vec<T>> = par_indexed(chunks, |c| {
        let mut rng = stream(master, label, c as u64);
        let len = CHUNK.min(n - c * CHUNK);
        (0..len).map(|_| draw(&mut rng)).collect()
    });
    parts.into_iter().flatten().collect()
}
