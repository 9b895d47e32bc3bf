//! Region proposals: a colour-similarity over-segmentation standing in for
//! the automatic mask generator of a promptable segmenter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{FeatureMap, Image, Mask};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSet {
    pub masks: Vec<Mask>,
    /// Area-weighted mean feature of each proposal, in backbone space.
    pub pooled_features: Vec<Vec<f64>>,
}

impl ProposalSet {
    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    /// Builds a set from masks, pooling `features` under each one.
    pub fn from_masks(masks: Vec<Mask>, features: &FeatureMap) -> Result<Self> {
        if masks.is_empty() {
            return Err(Error::Input("a proposal set needs at least one mask".into()));
        }
        let mut pooled_features = Vec::with_capacity(masks.len());
        for m in &masks {
            let frac = m.area_fractions(features.height, features.width)?;
            let f = features.weighted_mean(&frac).ok_or(Error::EmptyRegion)?;
            pooled_features.push(f);
        }
        Ok(Self {
            masks,
            pooled_features,
        })
    }
}

pub trait RegionProposer: Send + Sync {
    fn propose(&self, image: &Image, features: &FeatureMap) -> Result<ProposalSet>;
}

/// Connected components of the 4-neighbour graph whose edges join pixels of
/// similar box-blurred colour. Components under `min_area` pixels are
/// dropped; if nothing survives, the whole frame is the single proposal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColourGraphProposer {
    pub blur_radius: usize,
    /// Maximum L1 colour difference (in `[0,1]` units) between joined neighbours.
    pub edge_threshold: f64,
    pub min_area: usize,
}

impl Default for ColourGraphProposer {
    fn default() -> Self {
        Self {
            blur_radius: 2,
            edge_threshold: 0.07,
            min_area: 12,
        }
    }
}

impl ColourGraphProposer {
    fn blurred(&self, image: &Image) -> Vec<[f64; 3]> {
        let (h, w) = (image.height, image.width);
        let r = self.blur_radius as isize;
        let mut px: Vec<[f64; 3]> = (0..h * w)
            .map(|i| std::array::from_fn(|c| image.value(i / w, i % w, c)))
            .collect();
        let pass = |src: &[[f64; 3]], horizontal: bool| -> Vec<[f64; 3]> {
            let mut out = vec![[0.0; 3]; h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = [0.0; 3];
                    for d in -r..=r {
                        let (yy, xx) = if horizontal {
                            (y as isize, (x as isize + d).clamp(0, w as isize - 1))
                        } else {
                            ((y as isize + d).clamp(0, h as isize - 1), x as isize)
                        };
                        let p = src[yy as usize * w + xx as usize];
                        for c in 0..3 {
                            acc[c] += p[c];
                        }
                    }
                    out[y * w + x] = acc.map(|v| v / (2 * r + 1) as f64);
                }
            }
            out
        };
        if r > 0 {
            px = pass(&px, true);
            px = pass(&px, false);
        }
        px
    }

    /// Component label per pixel, labels in first-pixel scan order.
    pub fn components(&self, image: &Image) -> Vec<usize> {
        let (h, w) = (image.height, image.width);
        let px = self.blurred(image);
        let mut uf = UnionFind::new(h * w);
        let close = |a: [f64; 3], b: [f64; 3]| {
            (0..3).map(|c| (a[c] - b[c]).abs()).sum::<f64>() <= self.edge_threshold
        };
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if x + 1 < w && close(px[i], px[i + 1]) {
                    uf.union(i, i + 1);
                }
                if y + 1 < h && close(px[i], px[i + w]) {
                    uf.union(i, i + w);
                }
            }
        }
        let mut label_of_root = vec![usize::MAX; h * w];
        let mut next = 0;
        (0..h * w)
            .map(|i| {
                let r = uf.find(i);
                if label_of_root[r] == usize::MAX {
                    label_of_root[r] = next;
                    next += 1;
                }
                label_of_root[r]
            })
            .collect()
    }
}

impl RegionProposer for ColourGraphProposer {
    fn propose(&self, image: &Image, features: &FeatureMap) -> Result<ProposalSet> {
        let aligned = features.height > 0
            && features.width > 0
            && image.height.is_multiple_of(features.height)
            && image.width.is_multiple_of(features.width)
            && image.height / features.height == image.width / features.width;
        if !aligned {
            return Err(Error::Input(format!(
                "features {}×{} are not aligned with image {}×{}",
                features.height, features.width, image.height, image.width
            )));
        }
        let (h, w) = (image.height, image.width);
        let labels = self.components(image);
        let n_labels = labels.iter().max().map_or(0, |m| m + 1);
        let mut areas = vec![0usize; n_labels];
        for &l in &labels {
            areas[l] += 1;
        }
        let masks: Vec<Mask> = (0..n_labels)
            .filter(|&l| areas[l] >= self.min_area)
            .map(|l| Mask::new(h, w, labels.iter().map(|&x| x == l).collect()))
            .collect();
        let masks = if masks.is_empty() { vec![Mask::full(h, w)] } else { masks };
        ProposalSet::from_masks(masks, features)
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self {
            parent: (0..n).collect(),
            rank: vec![0; n],
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{FeatureExtractor, RandomConvBackbone};

    fn features(img: &Image) -> FeatureMap {
        RandomConvBackbone::new(8, 4, 0).unwrap().extract(img).unwrap()
    }

    #[test]
    fn uniform_image_gives_one_full_frame_proposal() {
        let img = Image::filled(32, 32, [40, 90, 200]);
        let p = ColourGraphProposer::default().propose(&img, &features(&img)).unwrap();
        assert_eq!(p.len(), 1);
        assert_eq!(p.masks[0].count(), 32 * 32);
    }

    #[test]
    fn proposals_are_nonempty_and_deterministic() {
        let mut img = Image::filled(32, 32, [20, 20, 20]);
        for y in 4..14 {
            for x in 4..14 {
                let i = (y * 32 + x) * 3;
                img.data[i..i + 3].copy_from_slice(&[220, 60, 30]);
            }
        }
        let f = features(&img);
        let prop = ColourGraphProposer::default();
        let a = prop.propose(&img, &f).unwrap();
        assert!(a.masks.iter().all(|m| !m.is_empty()));
        assert_eq!(a.pooled_features.len(), a.len());
        assert_eq!(a, prop.propose(&img, &f).unwrap());
    }

    #[test]
    fn misaligned_features_are_rejected() {
        let img = Image::filled(32, 16, [0, 0, 0]);
        let f = RandomConvBackbone::new(8, 4, 0)
            .unwrap()
            .extract(&Image::filled(16, 16, [0, 0, 0]))
            .unwrap();
        assert!(ColourGraphProposer::default().propose(&img, &f).is_err());
    }

    /// Breadth-first flood fill over exact colour equality.
    fn flood_fill_regions(img: &Image) -> usize {
        let (h, w) = (img.height, img.width);
        let mut seen = vec![false; h * w];
        let mut regions = 0;
        for start in 0..h * w {
            if seen[start] {
                continue;
            }
            regions += 1;
            let colour = img.pixel(start / w, start % w);
            let mut queue = std::collections::VecDeque::from([start]);
            seen[start] = true;
            while let Some(i) = queue.pop_front() {
                let (y, x) = (i / w, i % w);
                let mut nbrs = Vec::new();
                if y > 0 {
                    nbrs.push(i - w);
                }
                if y + 1 < h {
                    nbrs.push(i + w);
                }
                if x > 0 {
                    nbrs.push(i - 1);
                }
                if x + 1 < w {
                    nbrs.push(i + 1);
                }
                for j in nbrs {
                    if !seen[j] && img.pixel(j / w, j % w) == colour {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        regions
    }

    #[test]
    fn shape_and_two_distractors_match_flood_fill() {
        let mut img = Image::filled(32, 32, [15, 15, 15]);
        let mut paint = |y0: usize, x0: usize, size: usize, rgb: [u8; 3], disk: bool| {
            for y in y0..y0 + size {
                for x in x0..x0 + size {
                    let (dy, dx) = (y as f64 - (y0 as f64 + size as f64 / 2.0), x as f64 - (x0 as f64 + size as f64 / 2.0));
                    if !disk || dy * dy + dx * dx <= (size * size) as f64 / 4.0 {
                        let i = (y * 32 + x) * 3;
                        img.data[i..i + 3].copy_from_slice(&rgb);
                    }
                }
            }
        };
        paint(2, 2, 14, [200, 40, 60], true);
        paint(20, 4, 6, [150, 150, 150], false);
        paint(18, 22, 8, [110, 110, 110], false);
        let exact = ColourGraphProposer {
            blur_radius: 0,
            edge_threshold: 0.0,
            min_area: 1,
        };
        let want = flood_fill_regions(&img);
        assert_eq!(want, 4);
        let p = exact.propose(&img, &features(&img)).unwrap();
        assert_eq!(p.len(), want);
        let covered: usize = p.masks.iter().map(Mask::count).sum();
        assert_eq!(covered, 32 * 32);
        assert!(ColourGraphProposer::default().propose(&img, &features(&img)).unwrap().len() >= 3);
    }
}
