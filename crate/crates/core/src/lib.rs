//! Multi-task instrument playing technique (IPT) detection.
//!
//! The crate covers the whole path from annotated recordings to scored
//! event predictions:
//!
//! ```text
//! audio + annotations -> dataset (rasterize, segment, split)
//!                     -> encoder (13 layer outputs, weighted sum)
//!                     -> downstream (onset branch, IPT x pitch factor branch, refinement)
//!                     -> objective / trainer
//!                     -> postprocess (onset-gated decoding)
//!                     -> metrics (frame and event F1, micro and macro)
//! ```
//!
//! The encoder is pluggable: a HuBERT-style pre-trained backbone loaded from a
//! checkpoint directory, or a deterministic stub with the same shape contract.

pub mod config;
pub mod dataset;
pub mod downstream;
pub mod encoder;
mod error;
pub mod metrics;
pub mod objective;
pub mod params;
pub mod postprocess;
pub mod trainer;

pub use error::{Error, Result};
