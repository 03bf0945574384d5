//! Named random streams derived from a single master seed.
//!
//! Every consumer of randomness gets a ChaCha8 key from
//! `SHA-256(master seed, purpose tag, vertex path)`, and independent chains or
//! samples within one vertex use distinct ChaCha stream numbers under that key.
//! Results therefore do not depend on scheduling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::dyadic_tree::VertexAddress;

/// Purpose tags keep the streams of different consumers disjoint.
pub mod tag {
    pub const CONDITIONAL_SAMPLE: &str = "conditional-sample";
    pub const MH_CHAIN: &str = "mh-chain";
    pub const MH_PROBE: &str = "mh-probe";
    pub const NAIVE_MC: &str = "naive-mc";
    pub const REPLICATION: &str = "replication";
}

/// 256-bit key for one (seed, purpose, vertex) triple.
pub fn derive_key(master_seed: u64, purpose: &str, vertex: &VertexAddress) -> [u8; 32] {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update((purpose.len() as u32).to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update(vertex.to_bytes());
    hasher.finalize().into()
}

/// Generator for stream `stream` under the key of (seed, purpose, vertex).
pub fn vertex_stream(master_seed: u64, purpose: &str, vertex: &VertexAddress, stream: u64) -> ChaCha8Rng {
    stream_from_key(&derive_key(master_seed, purpose, vertex), stream)
}

pub fn stream_from_key(key: &[u8; 32], stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(*key);
    rng.set_stream(stream);
    rng
}

/// Child seed for replication `index` of an experiment.
pub fn sub_seed(master_seed: u64, purpose: &str, index: u64) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master_seed.to_le_bytes());
    hasher.update(purpose.as_bytes());
    hasher.update(index.to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}
