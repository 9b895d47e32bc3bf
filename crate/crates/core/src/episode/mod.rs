//! Episodic data model: class folds, datasets and episode sampling.

mod io;
mod synthetic;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{ModalityEmbedder, TextPayload};
use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

pub use io::{load_dataset, save_dataset, DatasetManifest, ManifestClass, ManifestSample};
pub use synthetic::{generate_synthetic_dataset, render_sample, ShapeKind, SyntheticDatasetSpec};

pub const NUM_FOLDS: usize = 4;

/// Class ids drawn from the 20 PASCAL VOC categories, 1-indexed.
pub const VOC_CLASSES: [&str; 20] = [
    "aeroplane",
    "bicycle",
    "bird",
    "boat",
    "bottle",
    "bus",
    "car",
    "cat",
    "chair",
    "cow",
    "diningtable",
    "dog",
    "horse",
    "motorbike",
    "person",
    "pottedplant",
    "sheep",
    "sofa",
    "train",
    "tvmonitor",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub fold_index: usize,
    pub base_classes: Vec<u32>,
    pub novel_classes: Vec<u32>,
}

/// Cross-validation split: fold `i` holds out the `i`-th contiguous block of
/// `n / 4` classes as novel, the rest are base classes.
pub fn split_folds(all_class_ids: &[u32], fold_index: usize) -> Result<ClassSplit> {
    if fold_index >= NUM_FOLDS {
        return Err(Error::Protocol(format!(
            "fold index {fold_index} outside [0, {}]",
            NUM_FOLDS - 1
        )));
    }
    let n = all_class_ids.len();
    if n == 0 || !n.is_multiple_of(NUM_FOLDS) {
        return Err(Error::Protocol(format!(
            "{n} classes cannot be divided evenly into {NUM_FOLDS} folds"
        )));
    }
    let block = n / NUM_FOLDS;
    let range = fold_index * block..(fold_index + 1) * block;
    let novel_classes = all_class_ids[range.clone()].to_vec();
    let base_classes = all_class_ids
        .iter()
        .enumerate()
        .filter(|(i, _)| !range.contains(i))
        .map(|(_, &c)| c)
        .collect();
    Ok(ClassSplit {
        fold_index,
        base_classes,
        novel_classes,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassInfo {
    pub id: u32,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub class_id: u32,
    pub image: Image,
    pub mask: Mask,
}

/// An immutable collection of labelled samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub classes: Vec<ClassInfo>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn class_ids(&self) -> Vec<u32> {
        self.classes.iter().map(|c| c.id).collect()
    }

    pub fn class_name(&self, id: u32) -> Result<&str> {
        self.classes
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.name.as_str())
            .ok_or_else(|| Error::Dataset(format!("unknown class id {id}")))
    }

    /// Sample indices of `class_id`, in dataset order.
    pub fn indices_of(&self, class_id: u32) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.class_id == class_id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn image_size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.image.height, s.image.width))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SupportPair {
    pub sample_index: usize,
    pub image: Image,
    pub mask: Mask,
}

/// One few-shot task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub class_id: u32,
    pub query_index: usize,
    pub query_image: Image,
    pub query_mask: Mask,
    pub supports: Vec<SupportPair>,
    pub text_payload: TextPayload,
    pub audio_payload: Vec<f64>,
}

impl Episode {
    pub fn shots(&self) -> usize {
        self.supports.len()
    }

    pub fn support_indices(&self) -> Vec<usize> {
        self.supports.iter().map(|s| s.sample_index).collect()
    }
}

/// Sample an episode of `class_id` with `shots` supports from all samples of
/// that class.
pub fn sample_episode(
    dataset: &Dataset,
    class_id: u32,
    shots: usize,
    rng: &mut impl Rng,
    payloads: &dyn ModalityEmbedder,
) -> Result<Episode> {
    let pool = dataset.indices_of(class_id);
    sample_episode_from(dataset, &pool, class_id, shots, rng, payloads)
}

/// Sample an episode whose query and supports are drawn, without
/// replacement, from `pool` (sample indices of `class_id`).
pub fn sample_episode_from(
    dataset: &Dataset,
    pool: &[usize],
    class_id: u32,
    shots: usize,
    rng: &mut impl Rng,
    payloads: &dyn ModalityEmbedder,
) -> Result<Episode> {
    if pool.len() < shots + 1 {
        return Err(Error::Sampling(format!(
            "class {class_id} has {} samples, need at least {} for a {shots}-shot episode",
            pool.len(),
            shots + 1
        )));
    }
    if let Some(&bad) = pool.iter().find(|&&i| dataset.samples.get(i).map(|s| s.class_id) != Some(class_id)) {
        return Err(Error::Sampling(format!("sample {bad} is not of class {class_id}")));
    }
    let picks = index::sample(rng, pool.len(), shots + 1);
    let mut picks = picks.into_iter().map(|i| pool[i]);
    let query_index = picks.next().expect("at least one pick");
    let supports = picks
        .map(|i| {
            let s = &dataset.samples[i];
            SupportPair {
                sample_index: i,
                image: s.image.clone(),
                mask: s.mask.clone(),
            }
        })
        .collect();
    let query = &dataset.samples[query_index];
    let name = dataset.class_name(class_id)?;
    Ok(Episode {
        class_id,
        query_index,
        query_image: query.image.clone(),
        query_mask: query.mask.clone(),
        supports,
        text_payload: payloads.embed_text(name)?,
        audio_payload: payloads.embed_audio(name)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::MockEmbedder;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_dataset() -> Dataset {
        generate_synthetic_dataset(&SyntheticDatasetSpec {
            num_classes: 4,
            image_size: 32,
            samples_per_class: 8,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn fold_blocks_for_twenty_classes() {
        let ids: Vec<u32> = (1..=20).collect();
        let s0 = split_folds(&ids, 0).unwrap();
        assert_eq!(s0.novel_classes, vec![1, 2, 3, 4, 5]);
        let s3 = split_folds(&ids, 3).unwrap();
        assert_eq!(s3.novel_classes, (16..=20).collect::<Vec<_>>());
        assert_eq!(s3.base_classes, (1..=15).collect::<Vec<_>>());
        for f in 0..4 {
            let s = split_folds(&ids, f).unwrap();
            assert!(s.novel_classes.iter().all(|c| !s.base_classes.contains(c)));
            assert_eq!(s.novel_classes.len() + s.base_classes.len(), 20);
        }
    }

    #[test]
    fn fold_errors() {
        let ids: Vec<u32> = (1..=10).collect();
        assert!(matches!(split_folds(&ids, 0), Err(Error::Protocol(_))));
        let ids: Vec<u32> = (1..=8).collect();
        assert!(matches!(split_folds(&ids, 4), Err(Error::Protocol(_))));
    }

    #[test]
    fn one_shot_query_is_not_a_support() {
        let ds = small_dataset();
        let emb = MockEmbedder::new(16);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ep = sample_episode(&ds, 2, 1, &mut rng, &emb).unwrap();
        assert_eq!(ep.shots(), 1);
        assert_ne!(ep.query_index, ep.supports[0].sample_index);
        assert_eq!(ep.class_id, 2);
    }

    #[test]
    fn five_shot_supports_are_distinct() {
        let ds = small_dataset();
        let emb = MockEmbedder::new(16);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let ep = sample_episode(&ds, 2, 5, &mut rng, &emb).unwrap();
        let idx = ep.support_indices();
        assert_eq!(idx.len(), 5);
        for i in 0..idx.len() {
            for j in 0..idx.len() {
                if i != j {
                    assert_ne!(idx[i], idx[j]);
                }
            }
            assert_ne!(idx[i], ep.query_index);
        }
    }

    #[test]
    fn too_few_samples_is_a_sampling_error() {
        let ds = small_dataset();
        let emb = MockEmbedder::new(16);
        let pool: Vec<usize> = ds.indices_of(1).into_iter().take(3).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = sample_episode_from(&ds, &pool, 1, 5, &mut rng, &emb).unwrap_err();
        assert!(matches!(err, Error::Sampling(_)));
    }

    #[test]
    fn zero_shot_episode_has_no_supports() {
        let ds = small_dataset();
        let emb = MockEmbedder::new(16);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ep = sample_episode(&ds, 3, 0, &mut rng, &emb).unwrap();
        assert!(ep.supports.is_empty());
        assert!(!ep.query_mask.is_empty());
    }

    #[test]
    fn query_never_among_supports_over_many_draws() {
        let ds = small_dataset();
        let emb = MockEmbedder::new(8);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..1000 {
            let class = 1 + (i % 4) as u32;
            let shots = 1 + i % 5;
            let ep = sample_episode(&ds, class, shots, &mut rng, &emb).unwrap();
            assert!(!ep.support_indices().contains(&ep.query_index));
        }
    }
}
