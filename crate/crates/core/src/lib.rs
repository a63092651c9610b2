//! Multilingual sequence-to-sequence toolkit built around bottleneck adapters
//! routed by language family.
//!
//! ```text
//! numcore   dense f64 tensors, tape autodiff, Adam
//! adapter   LN -> down -> ReLU -> up -> residual bottleneck unit
//! model     encoder-decoder transformer with adapter slots
//! langreg   language registry, grouping schemes, parameter budgets
//! data      vocabulary, bitext, temperature sampling, batching
//! trainer   per-group training, validation perplexity, checkpoints
//! cluster   mean-pooled vectors -> PCA -> diagonal GMM -> language groups
//! evalgen   greedy / beam decoding, corpus BLEU, grouped reports
//! cli       command-line front end
//! ```

pub mod adapter;
pub mod cli;
pub mod cluster;
pub mod data;
pub mod error;
pub mod evalgen;
pub mod langreg;
pub mod model;
pub mod numcore;
pub mod rngstate;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};

/// Seeded generator used throughout; its state is serializable for checkpoints.
pub type Rng = rand_chacha::ChaCha8Rng;

/// Construct the crate's generator from a 64-bit seed.
pub fn seeded_rng(seed: u64) -> Rng {
    use rand::SeedableRng;
    Rng::seed_from_u64(seed)
}

/// Independent 64-bit seed for the named purpose.
pub fn derive_seed(seed: u64, purpose: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}
