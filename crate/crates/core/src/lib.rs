//! Road-object segmentation for LiDAR point clouds.

pub mod class;
pub mod crf;
pub mod error;
pub mod eval;
pub mod instance;
pub mod io;
pub mod network;
pub mod projection;
pub mod render;
pub mod simulator;
pub mod tensor;

pub use class::{Class, NUM_CLASSES};
pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
