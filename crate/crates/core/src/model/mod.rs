//! The classifier: residual backbone with hybrid blocks and a gaze encoder.

mod config;
mod gaze;
mod net;

pub use config::ModelConfig;
pub use gaze::GazeEncoder;
pub use net::{DkghNet, NetBlock, NetOutput};
