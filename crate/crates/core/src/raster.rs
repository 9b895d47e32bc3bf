//! Image, mask and feature-map containers shared by every stage.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), height * width * Self::CHANNELS);
        Self { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(height * width * 3).collect();
        Self { height, width, data }
    }

    pub fn pixel(&self, y: usize, x: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Channel value scaled to `[0, 1]`.
    pub fn value(&self, y: usize, x: usize, c: usize) -> f64 {
        f64::from(self.data[(y * self.width + x) * 3 + c]) / 255.0
    }
}

/// Binary mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Self {
        assert_eq!(data.len(), height * width);
        Self { height, width, data }
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![false; height * width])
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self::new(height, width, vec![true; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a && **b).count()
    }

    pub fn union_count(&self, other: &Mask) -> usize {
        self.data.iter().zip(&other.data).filter(|(a, b)| **a || **b).count()
    }

    pub fn union(&self, other: &Mask) -> Mask {
        Mask::new(
            self.height,
            self.width,
            self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect(),
        )
    }

    pub fn complement(&self) -> Mask {
        Mask::new(self.height, self.width, self.data.iter().map(|b| !b).collect())
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
    }

    /// Fraction of each `h × w` cell covered by the mask. The mask size must
    /// be an integer multiple of the grid.
    pub fn area_fractions(&self, h: usize, w: usize) -> Result<Vec<f64>> {
        if h == 0 || w == 0 || !self.height.is_multiple_of(h) || !self.width.is_multiple_of(w) {
            return Err(Error::Input(format!(
                "mask {}×{} is not a multiple of grid {h}×{w}",
                self.height, self.width
            )));
        }
        let (sy, sx) = (self.height / h, self.width / w);
        let mut out = vec![0.0; h * w];
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(y, x) {
                    out[(y / sy) * w + x / sx] += 1.0;
                }
            }
        }
        let area = (sy * sx) as f64;
        out.iter_mut().for_each(|v| *v /= area);
        Ok(out)
    }

    /// Area-average onto an `h × w` grid, then binarise at 0.5 (inclusive).
    pub fn downsample(&self, h: usize, w: usize) -> Result<Mask> {
        let frac = self.area_fractions(h, w)?;
        Ok(Mask::new(h, w, frac.iter().map(|&f| f >= 0.5).collect()))
    }

    /// Nearest-neighbour upsample by integer factors.
    pub fn upsample_nearest(&self, fy: usize, fx: usize) -> Mask {
        Mask::from_fn(self.height * fy, self.width * fx, |y, x| self.get(y / fy, x / fx))
    }
}

/// A dense `height × width × dim` feature grid (channels last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), height * width * dim);
        Self {
            height,
            width,
            dim,
            data,
        }
    }

    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn cell(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn at(&self, y: usize, x: usize) -> &[f64] {
        self.cell(y * self.width + x)
    }

    /// Weighted mean of cell vectors; `None` when all weights are zero.
    pub fn weighted_mean(&self, weights: &[f64]) -> Option<Vec<f64>> {
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return None;
        }
        let mut out = vec![0.0; self.dim];
        for (i, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            for (o, v) in out.iter_mut().zip(self.cell(i)) {
                *o += w * v;
            }
        }
        out.iter_mut().for_each(|v| *v /= total);
        Some(out)
    }
}
