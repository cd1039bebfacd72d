//! Cooperative range-only SLAM: a UWB extended Kalman filter over robot and
//! beacons, a multi-resolution occupancy grid built from 2D LiDAR scans, and
//! a Gauss-Newton matcher that refines pose, heading and beacon positions
//! against both.

pub mod ekf;
pub mod error;
pub mod geometry;
pub mod map;
pub mod matcher;
pub mod metrics;
pub mod par;
pub mod pipeline;
pub mod run;
pub mod sim;

pub use error::{Error, Result};
