//! Self-supervised speech pre-training with fixed random-projection quantizers.
//!
//! The pipeline runs audio → log-mel features → global normalization → span
//! masking → a conformer encoder with one softmax head per codebook. Targets
//! come from a bank of frozen (projection, codebook) pairs. The objective mixes
//! masked cross-entropy with a KL term against cosine-similarity distributions,
//! optionally weighting codebooks by an utterance-level acoustic cluster.

pub mod audio;
pub mod cli;
pub mod clustering;
pub mod encoder;
pub mod error;
pub mod features;
pub mod losses;
pub mod masking;
pub mod quantizer;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
