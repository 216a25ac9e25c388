//! priorlab: a desk-scale laboratory for embedding-to-embedding prior models.
//!
//! The crate procedurally generates a pair of aligned "text"/"vision"
//! embedding spaces with ground-truth compositional structure, then trains
//! and compares three strategies for mapping text embeddings to vision
//! embeddings with a compact transformer:
//!
//! - `projection` — direct regression from a noise token plus the text
//!   embedding onto the target vision embedding;
//! - `diffusion` — a time-conditioned denoising prior trained with condition
//!   dropout and sampled with classifier-free guidance;
//! - `eclipse` — the projection objective plus a temperature-scaled
//!   contrastive regularizer that preserves text/vision alignment.
//!
//! Everything is seed-deterministic and CPU-only; training runs at `f32`
//! while gradient validation runs at `f64` through the same generic code.

pub mod checkpoint;
pub mod config;
pub mod diffusion;
pub mod eval;
pub mod grad;
pub mod gradcheck;
pub mod objectives;
pub mod prior;
pub mod rng;
pub mod train;
pub mod world;

use thiserror::Error as ThisError;

/// Crate-wide error type.
#[derive(Debug, ThisError)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("tape error: {0}")]
    Tape(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("world error: {0}")]
    World(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: u64, detail: String },
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

/// FNV-1a 64-bit hash, used for checkpoint checksums and config hashes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
