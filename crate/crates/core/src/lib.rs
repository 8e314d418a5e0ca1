//! Hierarchical context-aware Transformer TTS at desk scale.
//!
//! The crate implements windowed and global self-attention patterns for a
//! non-autoregressive TTS encoder/decoder, pitch-conditioned attention
//! scores fed by a char/word/sentence pitch hierarchy, a synthetic training
//! harness, and an attention-distance profiler.

pub mod analysis;
pub mod attention;
pub mod cli;
pub mod error;
pub mod exec;
pub mod model;
pub mod numerics;
pub mod pitch;
pub mod training;

pub use error::{Error, Result};
