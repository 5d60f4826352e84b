//! Weight-statistics fingerprints for transformer checkpoints.
//!
//! A fingerprint is, per projection kind, the sequence of per-layer standard
//! deviations of a model's weight matrices. Two fingerprints are compared by
//! normalizing each sequence, stretching the shorter one to the longer depth
//! and correlating them.

pub mod arch_map;
pub mod canonical;
pub mod cli;
pub mod compare;
pub mod error;
pub mod fingerprint;
pub mod manifest;
pub mod registry;
pub mod report;
pub mod synth;
pub mod tensor_store;

pub use error::{Error, ErrorFamily, Result};
