//! Seq2seq lifting of 2D keypoint sequences to 3D pose sequences with a
//! mixed spatio-temporal transformer: alternating spatial blocks (joints of
//! one frame attend to each other) and joint-separated temporal blocks (the
//! frames of one joint's trajectory attend to each other).

pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use error::{Error, Result};
