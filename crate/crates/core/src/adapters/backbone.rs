//! Frozen stand-in for the foundation-model image encoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::raster::{FeatureMap, Image};

pub trait FeatureExtractor: Send + Sync {
    /// Output channel count.
    fn dim(&self) -> usize;
    /// Image pixels per feature cell along each axis.
    fn stride(&self) -> usize;
    fn extract(&self, image: &Image) -> Result<FeatureMap>;
}

/// Parameter-free feature grid: three opponent-colour channels followed by
/// average-pooled rectified responses of fixed zero-mean random 3×3 filters.
#[derive(Debug, Clone)]
pub struct RandomConvBackbone {
    stride: usize,
    dim: usize,
    filters: Vec<[f64; 27]>,
}

const COLOUR_DIMS: usize = 3;

impl RandomConvBackbone {
    pub fn new(dim: usize, stride: usize, seed: u64) -> Result<Self> {
        if dim <= COLOUR_DIMS {
            return Err(Error::config(format!("backbone dim must exceed {COLOUR_DIMS}, got {dim}")));
        }
        if stride == 0 {
            return Err(Error::config("backbone stride must be positive"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xB4C4_B0E5);
        let filters = (0..dim - COLOUR_DIMS)
            .map(|_| {
                let mut f: [f64; 27] = std::array::from_fn(|_| StandardNormal.sample(&mut rng));
                let mean = f.iter().sum::<f64>() / 27.0;
                f.iter_mut().for_each(|v| *v -= mean);
                let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                f.iter_mut().for_each(|v| *v /= n);
                f
            })
            .collect();
        Ok(Self { stride, dim, filters })
    }
}

impl FeatureExtractor for RandomConvBackbone {
    fn dim(&self) -> usize {
        self.dim
    }

    fn stride(&self) -> usize {
        self.stride
    }

    fn extract(&self, image: &Image) -> Result<FeatureMap> {
        let s = self.stride;
        if !image.height.is_multiple_of(s) || !image.width.is_multiple_of(s) || image.height == 0 {
            return Err(Error::Input(format!(
                "image {}×{} is not divisible by stride {s}",
                image.height, image.width
            )));
        }
        let (h, w) = (image.height / s, image.width / s);
        let (ih, iw) = (image.height as isize, image.width as isize);
        let px = |y: isize, x: isize, c: usize| -> f64 {
            let y = y.clamp(0, ih - 1) as usize;
            let x = x.clamp(0, iw - 1) as usize;
            image.value(y, x, c)
        };
        let area = (s * s) as f64;
        let mut data = vec![0.0; h * w * self.dim];
        for y in 0..image.height {
            for x in 0..image.width {
                let cell = (y / s) * w + x / s;
                let out = &mut data[cell * self.dim..(cell + 1) * self.dim];
                let (r, g, b) = (image.value(y, x, 0), image.value(y, x, 1), image.value(y, x, 2));
                out[0] += 2.0 * (r - g) / area;
                out[1] += 2.0 * ((r + g) / 2.0 - b) / area;
                out[2] += 2.0 * ((r + g + b) / 3.0 - 0.4) / area;

                let mut patch = [0.0; 27];
                let mut k = 0;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        for c in 0..3 {
                            patch[k] = px(y as isize + dy, x as isize + dx, c);
                            k += 1;
                        }
                    }
                }
                for (o, f) in out[COLOUR_DIMS..].iter_mut().zip(&self.filters) {
                    let resp: f64 = f.iter().zip(&patch).map(|(a, b)| a * b).sum();
                    *o += resp.max(0.0) / area;
                }
            }
        }
        Ok(FeatureMap::new(h, w, self.dim, data))
    }
}
