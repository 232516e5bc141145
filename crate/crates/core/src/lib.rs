//! Ultrasound image quality in transformer feature space.
//!
//! - [`fr`]: full-reference token-relation distance and token loss
//! - [`nr`]: no-reference clean-manifold score with worst-region aggregation
//! - [`degrade`]: distortion suite with PSNR-matched calibration
//! - [`evalstats`]: rank statistics and evaluation protocol drivers
//! - [`study`]: 2AFC pair generation and agreement analysis
//! - [`store`]: on-disk formats

pub mod degrade;
pub mod error;
pub mod evalstats;
pub mod features;
pub mod fr;
pub mod image;
pub mod nr;
pub mod phantom;
pub mod store;
pub mod study;

pub use error::{Error, Result};
