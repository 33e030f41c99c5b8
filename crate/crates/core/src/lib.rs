//! Device-aware optical adversarial mask generation for face embedders,
//! with a software projector-camera channel for simulated physical scores.

pub mod error;
pub mod imaging;
pub mod rng;
pub mod embedder;
pub mod transforms;
pub mod losses;
pub mod colormap;
pub mod channelsim;
pub mod attack;
pub mod bench;

pub use error::{Error, Result};
pub use imaging::{BinaryMask, Grid, Image, ViewSet};
pub use rng::RngStream;
