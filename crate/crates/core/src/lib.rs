//! Lossy time-series compression with a recurrent autoencoder and an
//! adaptive-window search that enforces a hard maximum deviation.
//!
//! The pipeline: [`preprocess`] normalizes and segments traces, [`trainer`]
//! fits a [`rae::RaeParams`] model, and [`codec`] compresses a normalized
//! series into a [`codec::CompressedStream`] whose reconstruction never
//! deviates from the input by more than the configured epsilon.
//!
//! With the default `parallel` feature, batch entry points fan out over
//! rayon; without it they run sequentially and produce identical results.

pub mod codec;
pub mod error;
pub mod lstm;
pub mod nn;
pub mod par;
pub mod preprocess;
pub mod rae;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
