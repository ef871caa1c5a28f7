//! Cross-lingual manifold mixup on a desk-scale transformer encoder.
//!
//! The crate trains a small shared-weight encoder on synthetic parallel
//! text, mixing source-aware cross-attention states into the target stream
//! with a ratio gated by attention entropy, and provides the representation
//! analysis tools (linear CKA, Spearman, centroids, PCA, transfer gap) used
//! to study the source/target discrepancy.

pub mod analysis;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod gradsuite;
pub mod mixup;
pub mod numerics;
pub mod objectives;
pub mod pipeline;
pub mod runconfig;

pub use error::{Error, Result};
