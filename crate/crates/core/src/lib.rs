//! Cross-domain bearing fault diagnosis with domain-adversarial graph
//! convolutional networks, built on a small reverse-mode autodiff engine.

pub mod adversarial;
pub mod diff;
pub mod error;
pub mod graph;
pub mod layers;
pub mod losses;
pub mod model;
pub mod signal;
pub mod train;

pub use error::{Error, Result};

/// Mixes a base seed with a stream tag (FNV-1a) so that independent random
/// streams (initialization per layer, batching, dropout, splits) never
/// share state.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}
