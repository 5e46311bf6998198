//! Synthesized-artifact augmentation for cross-domain face anti-spoofing.

pub mod artifactviz;
pub mod cli;
pub mod config;
pub mod datapipe;
pub mod pcgan;
pub mod pmn;
pub mod error;
pub mod eval;
pub mod image;
pub mod rng;

pub use error::{FasError, Result};
