//! Desk-scale training and analysis stack for a character-level policy:
//! composite value/originality scoring against a frozen reference model,
//! group-relative policy optimization, n-gram diversity metrics, and
//! corpus overlap auditing.

pub mod config;
pub mod corpus;
pub mod error;
pub mod grpo;
pub mod lm;
pub mod metrics;
pub mod pipeline;
pub mod score;
pub mod tasks;
pub mod tensor;

pub use error::{Error, Result};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic seed derivation: one root seed plus structural indices
/// (step, slot, generation, ...) yields independent streams without any
/// global sampler state.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut s = splitmix64(base ^ 0x5851_F42D_4C95_7F2D);
    for &p in parts {
        s = splitmix64(s ^ splitmix64(p.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    s
}
