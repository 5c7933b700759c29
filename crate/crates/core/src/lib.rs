//! Adversarial evasion of keypoint-based body-shape estimation.
//!
//! The pipeline renders synthetic subjects, detects keypoint heatmaps with a
//! small convolutional network, perturbs images to remove or swap keypoints,
//! and measures how much a robust body-model fit degrades.

pub mod attacks;
pub mod bodymodel;
pub mod detector;
pub mod error;
pub mod eval;
pub mod fitter;
pub mod imaging;
pub mod parallel;
pub mod plot;
pub mod synth;

pub use error::{Error, Result};
