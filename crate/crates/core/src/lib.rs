//! Context-conditional generation with cached contexts.

pub mod bench;
pub mod cache;
pub mod checkpoint;
pub mod config;
pub mod decoder;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod pretrain;
pub mod store;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod vocab;
pub mod xc;

pub use error::{Error, Result};
