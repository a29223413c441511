//! Observation-addition bridging between frozen speech enhancement and ASR models.
//!
//! A small network looks at the noisy and enhanced filterbanks of an utterance
//! and predicts the coefficient ω used to mix the two waveforms,
//! `ỹ = ω·x + (1 − ω)·ŷ`, before recognition. It is trained from
//! non-intrusive quality scores, from per-coefficient word error rates, or
//! from both.

pub mod audio;
pub mod backends;
pub mod cache;
pub mod config;
pub mod error;
pub mod features;
pub mod manifest;
pub mod model;
pub mod pipeline;
pub mod supervision;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
