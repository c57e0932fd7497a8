//! Distribution-preserving watermarking for token generators.

pub mod bench;
pub mod cipher;
pub mod detector;
pub mod error;
pub mod generator;
pub mod lm;
pub mod reweight;
pub mod robustness;
pub mod stats;
pub mod types;

pub use error::{Error, Result};
