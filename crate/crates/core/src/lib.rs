//! Stereo visual-inertial odometry with predictive robust estimation.

pub mod error;
pub mod estimator;
pub mod dataset;
pub mod frontend;
pub mod geometry;
pub mod image;
pub mod kdtree;
pub mod model;
pub mod predictors;
pub mod seeds;
pub mod simulator;
pub mod training;

pub use error::{Error, Result};
