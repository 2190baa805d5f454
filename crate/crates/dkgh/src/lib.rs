//! Gaze-conditioned mixture-of-experts classifier: data formats, synthetic
//! data, training and the command line front end.

pub mod augment;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod dataset;
pub mod dkt;
pub mod error;
pub mod manifest;
pub mod pgm;
pub mod split;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
