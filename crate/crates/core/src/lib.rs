//! Endoscopy depth estimation from rendered training data.
//!
//! The crate covers the whole pipeline:
//!
//! * procedural colon density volumes and transfer functions ([`volume`]),
//! * a virtual wide-angle endoscope with tip-mounted point lights ([`endoscope`]),
//! * a first-surface raster renderer that yields grayscale images with exact
//!   depth ([`raster`]),
//! * a Monte Carlo volumetric path tracer that yields photorealistic,
//!   multi-style renderings sharing one opacity-threshold depth map
//!   ([`cinematic`]),
//! * SLIC superpixels, their adjacency graph and patches ([`superpixels`]),
//! * a from-scratch CNN for the unary term ([`network`]) and a continuous
//!   Gaussian CRF over superpixel depths ([`crf`]),
//! * joint training, fine-tuning and prediction ([`training`]), metrics
//!   ([`evaluation`]) and the on-disk dataset format ([`dataset`]).

pub mod cinematic;
pub mod config;
pub mod crf;
pub mod dataset;
pub mod endoscope;
pub mod error;
pub mod evaluation;
pub mod frame;
pub mod generate;
pub mod network;
pub mod raster;
pub mod seed;
pub mod superpixels;
pub mod training;
pub mod volume;

pub use error::{Error, Result};

/// Millimeter-valued 3-vector used for all world-space geometry.
pub type Vec3 = nalgebra::Vector3<f64>;

/// A ray with unit-norm direction. Distances along it are in millimeters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.dir * t
    }
}
