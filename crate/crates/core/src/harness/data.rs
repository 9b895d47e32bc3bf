use std::collections::BTreeMap;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{DataSource, EvalTarget, RunConfig};
use crate::adapters::{
    ColourGraphProposer, FixtureEmbedder, MockEmbedder, ModalityEmbedder, RandomConvBackbone, TextPayload,
};
use crate::episode::{generate_synthetic_dataset, load_dataset, sample_episode_from, split_folds, ClassSplit, Dataset};
use crate::error::{Error, Result};
use crate::model::{EpisodeInputs, PreparedSample};
use crate::raster::Mask;

/// Sample indices of one episode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpisodeRef {
    pub class_id: u32,
    pub query: usize,
    pub supports: Vec<usize>,
}

/// Dataset with frozen adapter outputs and per-class payloads.
pub struct Workspace {
    pub dataset: Dataset,
    pub split: ClassSplit,
    pub samples: Vec<PreparedSample>,
    pub image_size: (usize, usize),
    pub train_classes: Vec<u32>,
    /// Training samples of each class.
    pub train_pool: BTreeMap<u32, Vec<usize>>,
    /// Held-out samples of each training class.
    pub holdout_pool: BTreeMap<u32, Vec<usize>>,
    payloads: BTreeMap<u32, (TextPayload, Vec<f64>)>,
}

/// Load or generate the dataset, plus its embedding fixtures if it has any.
pub fn load_data(source: &DataSource) -> Result<(Dataset, Option<FixtureEmbedder>)> {
    match source {
        DataSource::Synthetic(spec) => Ok((generate_synthetic_dataset(spec)?, None)),
        DataSource::Path(root) => {
            let (ds, manifest) = load_dataset(root)?;
            let fixtures = FixtureEmbedder::from_manifest(root, &manifest)?;
            Ok((ds, (!fixtures.is_empty()).then_some(fixtures)))
        }
    }
}

impl Workspace {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        cfg.validate()?;
        let (dataset, fixtures) = load_data(&cfg.data)?;
        let embedder: Box<dyn ModalityEmbedder> = match fixtures {
            Some(f) => Box::new(f),
            None => Box::new(MockEmbedder::new(cfg.model.dim).with_audio_text_cosine(cfg.audio_text_cosine)),
        };
        if embedder.dim() != cfg.model.dim {
            return Err(Error::config(format!(
                "embedding fixtures have dimension {}, model dim is {}",
                embedder.dim(),
                cfg.model.dim
            )));
        }
        let image_size = dataset
            .image_size()
            .ok_or_else(|| Error::Dataset("dataset has no samples".into()))?;
        if dataset.samples.iter().any(|s| (s.image.height, s.image.width) != image_size) {
            return Err(Error::Dataset("images differ in size".into()));
        }
        let split = split_folds(&dataset.class_ids(), cfg.fold)?;
        let train_classes = match &cfg.train_classes {
            Some(c) => {
                if c.is_empty() {
                    return Err(Error::config("train_classes is empty"));
                }
                for id in c {
                    dataset.class_name(*id).map_err(|e| Error::config(e.to_string()))?;
                }
                c.clone()
            }
            None => split.base_classes.clone(),
        };
        let mut train_pool = BTreeMap::new();
        let mut holdout_pool = BTreeMap::new();
        for &c in &train_classes {
            let mut all = dataset.indices_of(c);
            if all.len() < cfg.holdout_per_class + cfg.shots + 1 {
                return Err(Error::config(format!(
                    "class {c} has {} samples; holding out {} leaves too few for {}-shot episodes",
                    all.len(),
                    cfg.holdout_per_class,
                    cfg.shots
                )));
            }
            let held = all.split_off(all.len() - cfg.holdout_per_class);
            train_pool.insert(c, all);
            holdout_pool.insert(c, held);
        }
        let backbone = RandomConvBackbone::new(cfg.model.visual_dim, cfg.model.stride, cfg.backbone_seed)?;
        let proposer = ColourGraphProposer::default();
        let samples = dataset
            .samples
            .par_iter()
            .map(|s| PreparedSample::new(&s.image, &backbone, &proposer))
            .collect::<Result<Vec<_>>>()?;
        let mut payloads = BTreeMap::new();
        for c in &dataset.classes {
            let text = embedder.embed_text(&c.name)?;
            let audio = embedder.embed_audio(&c.name)?;
            payloads.insert(c.id, (text, audio));
        }
        Ok(Self {
            dataset,
            split,
            samples,
            image_size,
            train_classes,
            train_pool,
            holdout_pool,
            payloads,
        })
    }

    pub fn payload(&self, class_id: u32) -> Result<&(TextPayload, Vec<f64>)> {
        self.payloads
            .get(&class_id)
            .ok_or_else(|| Error::Dataset(format!("no payload for class {class_id}")))
    }

    /// `(prepared, mask)` pairs of an episode's supports.
    pub fn supports(&self, ep: &EpisodeRef) -> Vec<(&PreparedSample, &Mask)> {
        ep.supports
            .iter()
            .map(|&i| (&self.samples[i], &self.dataset.samples[i].mask))
            .collect()
    }

    pub fn inputs<'a>(&'a self, ep: &EpisodeRef, supports: &'a [(&'a PreparedSample, &'a Mask)]) -> Result<EpisodeInputs<'a>> {
        let (text, audio) = self.payload(ep.class_id)?;
        Ok(EpisodeInputs {
            query: &self.samples[ep.query],
            image_size: self.image_size,
            supports,
            text,
            audio,
        })
    }

    pub fn target(&self, ep: &EpisodeRef) -> &Mask {
        &self.dataset.samples[ep.query].mask
    }

    /// A training episode: a uniformly drawn training class, query and
    /// supports from its training pool.
    pub fn sample_train(&self, shots: usize, rng: &mut impl Rng) -> Result<EpisodeRef> {
        let class_id = self.train_classes[rng.random_range(0..self.train_classes.len())];
        self.sample_from(&self.train_pool[&class_id], class_id, shots, rng)
    }

    fn sample_from(&self, pool: &[usize], class_id: u32, shots: usize, rng: &mut impl Rng) -> Result<EpisodeRef> {
        let (text, audio) = self.payload(class_id)?;
        let fixed = FixedPayload(text, audio);
        let ep = sample_episode_from(&self.dataset, pool, class_id, shots, rng, &fixed)?;
        Ok(EpisodeRef {
            class_id,
            query: ep.query_index,
            supports: ep.support_indices(),
        })
    }

    pub fn eval_classes(&self, target: EvalTarget) -> Vec<u32> {
        match target {
            EvalTarget::Novel => self.split.novel_classes.clone(),
            EvalTarget::Train | EvalTarget::HeldOut => self.train_classes.clone(),
        }
    }

    /// The `i`-th evaluation episode of `class_id`, a pure function of
    /// `(seed, class_id, i)`.
    pub fn eval_episode(&self, target: EvalTarget, shots: usize, seed: u64, class_id: u32, i: usize) -> Result<EpisodeRef> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(((class_id as u64) << 32) | i as u64);
        match target {
            EvalTarget::Novel => self.sample_from(&self.dataset.indices_of(class_id), class_id, shots, &mut rng),
            EvalTarget::Train => self.sample_from(&self.train_pool[&class_id], class_id, shots, &mut rng),
            EvalTarget::HeldOut => {
                let held = &self.holdout_pool[&class_id];
                if held.is_empty() {
                    return Err(Error::config("held-out evaluation needs holdout_per_class > 0"));
                }
                let pool = &self.train_pool[&class_id];
                let query = held[rng.random_range(0..held.len())];
                let supports = index::sample(&mut rng, pool.len(), shots).into_iter().map(|k| pool[k]).collect();
                Ok(EpisodeRef {
                    class_id,
                    query,
                    supports,
                })
            }
        }
    }
}

/// Hands back precomputed payloads so episode sampling does not re-embed.
struct FixedPayload<'a>(&'a TextPayload, &'a [f64]);

impl ModalityEmbedder for FixedPayload<'_> {
    fn dim(&self) -> usize {
        self.1.len()
    }

    fn embed_text(&self, _category: &str) -> Result<TextPayload> {
        Ok(self.0.clone())
    }

    fn embed_audio(&self, _category: &str) -> Result<Vec<f64>> {
        Ok(self.1.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::episode::SyntheticDatasetSpec;

    fn cfg() -> RunConfig {
        RunConfig {
            data: DataSource::Synthetic(SyntheticDatasetSpec {
                image_size: 32,
                samples_per_class: 8,
                ..Default::default()
            }),
            model: crate::model::ModelDims {
                dim: 8,
                visual_dim: 6,
                ..Default::default()
            },
            holdout_per_class: 2,
            ..Default::default()
        }
    }

    #[test]
    fn pools_partition_training_classes() {
        let ws = Workspace::new(&cfg()).unwrap();
        assert_eq!(ws.train_classes, ws.split.base_classes);
        for c in &ws.train_classes {
            let (t, h) = (&ws.train_pool[c], &ws.holdout_pool[c]);
            assert_eq!(t.len(), 6);
            assert_eq!(h.len(), 2);
            assert!(t.iter().all(|i| !h.contains(i)));
        }
        assert_eq!(ws.samples.len(), ws.dataset.samples.len());
    }

    #[test]
    fn eval_episodes_are_pure_and_respect_pools() {
        let ws = Workspace::new(&cfg()).unwrap();
        let c = ws.train_classes[0];
        for i in 0..20 {
            let a = ws.eval_episode(EvalTarget::HeldOut, 2, 7, c, i).unwrap();
            assert_eq!(a, ws.eval_episode(EvalTarget::HeldOut, 2, 7, c, i).unwrap());
            assert!(ws.holdout_pool[&c].contains(&a.query));
            assert!(a.supports.iter().all(|s| ws.train_pool[&c].contains(s)));
            let t = ws.eval_episode(EvalTarget::Train, 1, 7, c, i).unwrap();
            assert!(!t.supports.contains(&t.query));
            assert!(ws.train_pool[&c].contains(&t.query));
        }
        let n = ws.split.novel_classes[0];
        let e = ws.eval_episode(EvalTarget::Novel, 1, 7, n, 0).unwrap();
        assert_eq!(ws.dataset.samples[e.query].class_id, n);
    }

    #[test]
    fn too_large_holdout_is_a_config_error() {
        let mut c = cfg();
        c.holdout_per_class = 7;
        assert!(matches!(Workspace::new(&c), Err(Error::Config(_))));
    }
}
