//! Temporal-inconsistency guided quality assessment for super-resolved video.
//!
//! The pipeline measures how the optical flow of a distorted video departs
//! from that of its reference, uses the resulting maps to highlight frames for
//! two spatial feature extractors, and aggregates features over time with a
//! capacity-limited segmentation followed by graph attention and a GRU.

pub mod error;
pub mod flow;
pub mod igtm;
pub mod ihsm;
pub mod inconsistency;
pub mod media;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
