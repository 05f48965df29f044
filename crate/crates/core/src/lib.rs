//! Pillar-based LiDAR 3D object detection with a lightweight dense backbone.

pub mod error;
pub mod boxes;
pub mod tensor;
pub mod pointcloud;
pub mod params;
pub mod pillar;
pub mod backbone;
pub mod eval;
pub mod detector;
pub mod model;
pub mod cost;
pub mod config;
pub mod checkpoint;
pub mod train;
pub mod gradsuite;

pub use error::{Error, Result};
