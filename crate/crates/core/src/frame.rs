//! In-memory frames: an RGB image, its aligned depth map and provenance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Interleaved RGB image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f32>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> [f32; 3]) -> Self {
        let mut img = Self::new(width, height);
        for y in 0..height {
            for x in 0..width {
                img.set(x, y, f(x, y));
            }
        }
        img
    }

    /// Grayscale image with the value replicated to all three channels.
    pub fn from_gray(width: usize, height: usize, gray: &[f32]) -> Result<Self> {
        if gray.len() != width * height {
            return Err(Error::Shape(format!(
                "{} gray samples for a {width}x{height} image",
                gray.len()
            )));
        }
        Ok(Self { width, height, data: gray.iter().flat_map(|&g| [g, g, g]).collect() })
    }

    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Per-pixel channel mean, row-major.
    pub fn intensity(&self) -> Vec<f64> {
        self.data
            .chunks_exact(3)
            .map(|c| (c[0] as f64 + c[1] as f64 + c[2] as f64) / 3.0)
            .collect()
    }
}

/// Depth in millimeters along the viewing ray. Pixels without valid depth hold
/// `sentinel`.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub width: usize,
    pub height: usize,
    pub sentinel: f32,
    pub data: Vec<f32>,
}

impl DepthMap {
    pub fn filled(width: usize, height: usize, sentinel: f32) -> Self {
        Self { width, height, sentinel, data: vec![sentinel; width * height] }
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.data[y * self.width + x]
    }

    pub fn is_valid(&self, i: usize) -> bool {
        let d = self.data[i];
        d != self.sentinel && d.is_finite() && d > 0.0
    }

    pub fn valid_count(&self) -> usize {
        (0..self.data.len()).filter(|&i| self.is_valid(i)).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Renderer {
    Raster,
    Cinematic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub scene_id: u64,
    /// 0 for raster renderings.
    pub style_id: u32,
    pub pose_index: u32,
    pub renderer: Renderer,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub image: ImageRgb,
    pub depth: DepthMap,
    pub meta: FrameMeta,
}

impl Frame {
    pub fn new(image: ImageRgb, depth: DepthMap, meta: FrameMeta) -> Result<Self> {
        if image.width != depth.width || image.height != depth.height {
            return Err(Error::Shape(format!(
                "image {}x{} vs depth {}x{}",
                image.width, image.height, depth.width, depth.height
            )));
        }
        Ok(Self { image, depth, meta })
    }
}

/// Compresses linear radiance with `x / (1 + x)` then applies display gamma 2.2.
pub fn tone_map(x: f64) -> f64 {
    let x = x.max(0.0);
    (x / (1.0 + x)).powf(1.0 / 2.2)
}
