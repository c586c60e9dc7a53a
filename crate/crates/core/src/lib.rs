//! Hypertension control risk stratification from longitudinal EHR encounters.

pub mod attribution;
pub mod cohort;
pub mod ehr;
pub mod featurize;
pub mod synth;
pub mod nnet;
pub mod pipeline;
pub mod train;
pub mod error;
pub mod eval;

pub use error::{Error, ErrorClass, Result};

/// Independent sub-seed for a named pipeline stage: the first eight bytes of
/// SHA-256 over `"{seed}:{stage}"`, little-endian.
pub fn derive_seed(seed: u64, stage: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let digest = Sha256::digest(format!("{seed}:{stage}").as_bytes());
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}
