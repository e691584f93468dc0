//! Object-hallucination detection for generated image captions.
//!
//! The pipeline reads generation traces, extracts object mentions and labels
//! them against ground truth, computes token-level uncertainty and attention
//! features per mention, and trains lightweight meta classifiers that flag
//! hallucinated mentions without access to ground truth.

pub mod chair;
pub mod error;
pub mod features;
pub mod io;
pub mod learn;
pub mod metrics;
pub mod pipeline;
pub mod protocol;
pub mod synth;
pub mod trace;

pub use error::{Error, Result};
