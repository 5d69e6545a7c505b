//! Streaming 3D Gaussian scene reconstruction from multi-camera point maps.

pub mod decoder;
pub mod error;
pub mod fusion;
pub mod gaussian;
pub mod geom;
pub mod gradcheck;
pub mod image;
pub mod losses;
pub mod memory;
pub mod nn;
pub mod optimize;
pub mod pipeline;
pub mod render;
pub mod scaffold;
pub mod scale;
pub mod synthetic;
pub mod weights;

pub use error::{Error, Result};
