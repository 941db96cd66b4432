//! Interaction-aware 3D human pose estimation from LiDAR point clouds.

pub mod error;
pub mod tensor;
pub mod temporal;
pub mod gridpool;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod serialize;
pub mod sim;
pub mod types;

pub use error::{Error, Result};
