//! Approximate description length toolkit: unbiased estimators, integer
//! sketches, bracketed-string codes, seeded network compressors, covering and
//! generalization calculators, and a quadratic-shattering construction.

pub mod activations;
pub mod codec;
pub mod compressor;
pub mod error;
pub mod estimators;
pub mod numerics;
pub mod shattering;
pub mod sketch;
pub mod suites;

pub use error::{Error, Result};
