//! IoU metrics and their order-independent accumulation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::raster::Mask;

/// Foreground where `σ(z) > 0.5`.
pub fn binarize(logits: &[f64], height: usize, width: usize) -> Mask {
    Mask::new(height, width, logits.iter().map(|&z| z > 0.0).collect())
}

fn ratio(inter: u64, union: u64) -> f64 {
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Intersection over union; two empty masks score 1.
pub fn iou(pred: &Mask, target: &Mask) -> f64 {
    ratio(pred.intersection_count(target) as u64, pred.union_count(target) as u64)
}

/// Mean of foreground and background IoU.
pub fn fb_iou(pred: &Mask, target: &Mask) -> f64 {
    0.5 * (iou(pred, target) + iou(&pred.complement(), &target.complement()))
}

pub fn miou(class_ious: &[f64]) -> f64 {
    if class_ious.is_empty() {
        return 0.0;
    }
    class_ious.iter().sum::<f64>() / class_ious.len() as f64
}

/// Intersection and union pixel counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub intersection: u64,
    pub union: u64,
}

impl Counts {
    pub fn of(pred: &Mask, target: &Mask) -> Self {
        Self {
            intersection: pred.intersection_count(target) as u64,
            union: pred.union_count(target) as u64,
        }
    }

    pub fn add(&mut self, o: Counts) {
        self.intersection += o.intersection;
        self.union += o.union;
    }

    pub fn iou(&self) -> f64 {
        ratio(self.intersection, self.union)
    }
}

/// Per-class foreground counts plus pooled foreground and background counts
/// over every episode. Merging is associative and commutative.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricAccumulator {
    pub per_class: BTreeMap<u32, Counts>,
    pub foreground: Counts,
    pub background: Counts,
    pub episodes: u64,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, class_id: u32, pred: &Mask, target: &Mask) {
        let fg = Counts::of(pred, target);
        self.per_class.entry(class_id).or_default().add(fg);
        self.foreground.add(fg);
        self.background.add(Counts::of(&pred.complement(), &target.complement()));
        self.episodes += 1;
    }

    pub fn merge(&mut self, o: &MetricAccumulator) {
        for (&c, &n) in &o.per_class {
            self.per_class.entry(c).or_default().add(n);
        }
        self.foreground.add(o.foreground);
        self.background.add(o.background);
        self.episodes += o.episodes;
    }

    pub fn class_ious(&self) -> BTreeMap<u32, f64> {
        self.per_class.iter().map(|(&c, n)| (c, n.iou())).collect()
    }

    pub fn miou(&self) -> f64 {
        miou(&self.class_ious().into_values().collect::<Vec<_>>())
    }

    pub fn fb_iou(&self) -> f64 {
        0.5 * (self.foreground.iou() + self.background.iou())
    }
}
