//! Streaming LiDAR object detection: packet simulation, bird's-eye-view
//! rasterization, a small tensor engine, the recurrent detector, training,
//! latency-aware evaluation and file formats.

pub mod bev;
pub mod cli;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod net;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
