//! Simulation toolkit for self-repairing neural networks on differential
//! phase-change-memory (PCM) crossbars.
//!
//! The pipeline runs end to end:
//!
//! 1. [`nn`] trains a small convolutional network with a penalty that keeps
//!    weight magnitudes inside a band `[epsilon, theta]`, plus a noise-aware
//!    baseline.
//! 2. [`quantizer`] searches a positive and a negative bin set with simulated
//!    annealing and decomposes every weight into integer multiples of the two
//!    base steps.
//! 3. [`device`] and [`crossbar`] program those multiples onto pairs of PCM
//!    cells, with programming error, read noise and power-law drift.
//! 4. [`repair`] probes each tile with unit vectors, detects drift against the
//!    baseline captured at programming time and pulses drifted cells back to
//!    their stored multiples.
//! 5. [`compress`] bit-packs the integer matrices, [`data`] handles datasets and
//!    file formats, and [`harness`] orchestrates whole experiments.

// `!(x > 0.0)` style checks are deliberate: they reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod compress;
pub mod crossbar;
pub mod data;
pub mod device;
pub mod error;
pub mod harness;
pub mod nn;
pub mod quantizer;
pub mod repair;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
