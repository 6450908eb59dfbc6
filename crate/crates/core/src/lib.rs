//! Magnetic-field indoor localization.
//!
//! Magnetometer trials are resampled into a global frame, cut into sliding
//! windows, and each window is encoded as a stack of images (recurrence
//! plots, Gramian angular fields, Markov transition fields). Small CNN and
//! CNN+GRU models map those stacks to landmark classes or planar positions.
//! A fitted transform aligns the magnetometer of one platform to another so a
//! model trained on one platform can localize the other.
//!
//! The crate is `no_std` with `alloc`; file formats and the command line live
//! in the `magloc` crate.

#![no_std]

extern crate alloc;

pub mod alignment;
pub mod error;
pub mod imaging;
pub mod ingest;
pub mod landmarks;
pub mod models;
pub mod neuralnet;
pub mod synth;

pub use error::{Error, Result};
