//! Simulation library for IRS-assisted uplinks with low-resolution ADCs.

pub mod beamforming;
pub mod channel_model;
pub mod error;
pub mod estimation;
pub mod experiments;
pub mod gaussian;
pub mod quantization;
pub mod selftest;

pub use error::{Error, Result};
