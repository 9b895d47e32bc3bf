//! Text and audio embedders: a hash-seeded mock and a fixture-file loader.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::episode::{DatasetManifest, VOC_CLASSES};
use crate::error::{Error, Result};

/// Semantic payload for one category: name, discriminative-descriptor and
/// co-occurring-background embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPayload {
    pub category_embedding: Vec<f64>,
    pub descriptor_embedding: Vec<f64>,
    pub background_embedding: Vec<f64>,
    pub raw_strings: RawStrings,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawStrings {
    pub category: String,
    pub descriptor: String,
    pub co_occurring: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingRole {
    Category,
    Descriptor,
    Background,
    Audio,
}

impl EmbeddingRole {
    pub const ALL: [EmbeddingRole; 4] = [
        EmbeddingRole::Category,
        EmbeddingRole::Descriptor,
        EmbeddingRole::Background,
        EmbeddingRole::Audio,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EmbeddingRole::Category => "category",
            EmbeddingRole::Descriptor => "descriptor",
            EmbeddingRole::Background => "background",
            EmbeddingRole::Audio => "audio",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

/// Source of category-level text and audio embeddings in the shared space.
pub trait ModalityEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed_text(&self, category: &str) -> Result<TextPayload>;
    fn embed_audio(&self, category: &str) -> Result<Vec<f64>>;
}

/// Deterministic stand-in for the text/audio encoders. Every vector is a
/// unit-norm Gaussian draw seeded by `sha256(category, role)`; audio vectors
/// are constructed to have cosine `audio_text_cosine` with the category vector.
#[derive(Debug, Clone)]
pub struct MockEmbedder {
    dim: usize,
    audio_text_cosine: f64,
    vocabulary: Vec<String>,
}

impl MockEmbedder {
    pub const DEFAULT_AUDIO_TEXT_COSINE: f64 = 0.6;

    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            audio_text_cosine: Self::DEFAULT_AUDIO_TEXT_COSINE,
            vocabulary: VOC_CLASSES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn with_audio_text_cosine(mut self, rho: f64) -> Self {
        assert!((-1.0..=1.0).contains(&rho), "cosine {rho} outside [-1, 1]");
        self.audio_text_cosine = rho;
        self
    }

    pub fn with_vocabulary(mut self, words: impl IntoIterator<Item = String>) -> Self {
        self.vocabulary.extend(words);
        self
    }

    fn check(&self, category: &str, role: EmbeddingRole) -> Result<()> {
        if self.vocabulary.iter().any(|w| w == category) {
            Ok(())
        } else {
            Err(Error::MissingFixture {
                category: category.into(),
                role: role.as_str().into(),
            })
        }
    }

    fn raw(&self, category: &str, role: EmbeddingRole) -> Vec<f64> {
        let mut h = Sha256::new();
        h.update(category.as_bytes());
        h.update([0u8]);
        h.update(role.as_str().as_bytes());
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect()
    }

    fn unit(&self, category: &str, role: EmbeddingRole) -> Vec<f64> {
        normalized(self.raw(category, role))
    }
}

impl ModalityEmbedder for MockEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, category: &str) -> Result<TextPayload> {
        self.check(category, EmbeddingRole::Category)?;
        Ok(TextPayload {
            category_embedding: self.unit(category, EmbeddingRole::Category),
            descriptor_embedding: self.unit(category, EmbeddingRole::Descriptor),
            background_embedding: self.unit(category, EmbeddingRole::Background),
            raw_strings: RawStrings {
                category: category.into(),
                descriptor: format!("distinguishing attributes of {category}"),
                co_occurring: format!("scene context around {category}"),
            },
        })
    }

    fn embed_audio(&self, category: &str) -> Result<Vec<f64>> {
        self.check(category, EmbeddingRole::Audio)?;
        let c = self.unit(category, EmbeddingRole::Category);
        let raw = self.raw(category, EmbeddingRole::Audio);
        let along = dot(&raw, &c);
        let orth = normalized(raw.iter().zip(&c).map(|(r, ci)| r - along * ci).collect());
        let rho = self.audio_text_cosine;
        let perp = (1.0 - rho * rho).max(0.0).sqrt();
        Ok(normalized(c.iter().zip(&orth).map(|(ci, oi)| rho * ci + perp * oi).collect()))
    }
}

/// Fixture manifest for a single embedding: a JSON file next to a raw
/// little-endian `f32` blob.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureManifest {
    pub category: String,
    pub role: EmbeddingRole,
    pub dim: usize,
    pub blob_path: PathBuf,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

/// Write `values` as a fixture under `dir`; returns the manifest path.
pub fn write_fixture(dir: &Path, category: &str, role: EmbeddingRole, values: &[f64]) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let stem = format!("{category}.{}", role.as_str());
    let blob: Vec<u8> = values.iter().flat_map(|&v| (v as f32).to_le_bytes()).collect();
    let blob_name = PathBuf::from(format!("{stem}.f32"));
    let blob_path = dir.join(&blob_name);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let manifest = FixtureManifest {
        category: category.into(),
        role,
        dim: values.len(),
        blob_path: blob_name,
        sha256: hex::encode(Sha256::digest(&blob)),
        text: None,
    };
    let path = dir.join(format!("{stem}.json"));
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Read and validate a fixture manifest plus its blob.
pub fn read_fixture(manifest_path: &Path) -> Result<(FixtureManifest, Vec<f64>)> {
    let bytes = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let manifest: FixtureManifest = serde_json::from_slice(&bytes)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let blob_path = base.join(&manifest.blob_path);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let bad = |reason: String| Error::Fixture {
        path: manifest_path.to_path_buf(),
        reason,
    };
    let digest = hex::encode(Sha256::digest(&blob));
    if !digest.eq_ignore_ascii_case(&manifest.sha256) {
        return Err(bad(format!("sha256 mismatch: manifest {} blob {digest}", manifest.sha256)));
    }
    if blob.len() != manifest.dim * 4 {
        return Err(bad(format!(
            "blob holds {} bytes, expected {} for dim {}",
            blob.len(),
            manifest.dim * 4,
            manifest.dim
        )));
    }
    let values: Vec<f64> = blob
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite value".into()));
    }
    Ok((manifest, values))
}

/// Embeddings produced offline by real encoders, loaded from fixture files.
#[derive(Debug, Clone, Default)]
pub struct FixtureEmbedder {
    dim: usize,
    table: HashMap<(String, EmbeddingRole), (Vec<f64>, Option<String>)>,
}

impl FixtureEmbedder {
    pub fn from_files<P: AsRef<Path>>(paths: impl IntoIterator<Item = P>) -> Result<Self> {
        let mut out = Self::default();
        for p in paths {
            let p = p.as_ref();
            let (m, v) = read_fixture(p)?;
            if out.table.is_empty() {
                out.dim = m.dim;
            } else if m.dim != out.dim {
                return Err(Error::Fixture {
                    path: p.to_path_buf(),
                    reason: format!("dim {} differs from {}", m.dim, out.dim),
                });
            }
            out.table.insert((m.category, m.role), (v, m.text));
        }
        Ok(out)
    }

    /// Every `*.json` fixture manifest in `dir`.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        Self::from_files(paths)
    }

    pub fn from_manifest(root: &Path, manifest: &DatasetManifest) -> Result<Self> {
        let paths: Vec<PathBuf> = manifest
            .classes
            .iter()
            .flat_map(|c| c.fixtures.values().map(|p| root.join(p)))
            .collect();
        Self::from_files(paths)
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    fn lookup(&self, category: &str, role: EmbeddingRole) -> Result<(&Vec<f64>, Option<&String>)> {
        self.table
            .get(&(category.to_string(), role))
            .map(|(v, t)| (v, t.as_ref()))
            .ok_or_else(|| Error::MissingFixture {
                category: category.into(),
                role: role.as_str().into(),
            })
    }
}

impl ModalityEmbedder for FixtureEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed_text(&self, category: &str) -> Result<TextPayload> {
        let (c, _) = self.lookup(category, EmbeddingRole::Category)?;
        let (d, dt) = self.lookup(category, EmbeddingRole::Descriptor)?;
        let (b, bt) = self.lookup(category, EmbeddingRole::Background)?;
        Ok(TextPayload {
            category_embedding: c.clone(),
            descriptor_embedding: d.clone(),
            background_embedding: b.clone(),
            raw_strings: RawStrings {
                category: category.into(),
                descriptor: dt.cloned().unwrap_or_default(),
                co_occurring: bt.cloned().unwrap_or_default(),
            },
        })
    }

    fn embed_audio(&self, category: &str) -> Result<Vec<f64>> {
        Ok(self.lookup(category, EmbeddingRole::Audio)?.0.clone())
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn normalized(mut v: Vec<f64>) -> Vec<f64> {
    let n = norm(&v);
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    v
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let d = norm(a) * norm(b);
    if d == 0.0 {
        0.0
    } else {
        dot(a, b) / d
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_roles_are_distinct_unit_vectors() {
        let e = MockEmbedder::new(64);
        let t = e.embed_text("aeroplane").unwrap();
        for v in [&t.category_embedding, &t.descriptor_embedding, &t.background_embedding] {
            assert!((norm(v) - 1.0).abs() < 1e-12);
            assert_eq!(v.len(), 64);
        }
        assert_ne!(t.category_embedding, t.descriptor_embedding);
        assert_ne!(t.descriptor_embedding, t.background_embedding);
        assert_ne!(t.category_embedding, t.background_embedding);
        assert_eq!(t, e.embed_text("aeroplane").unwrap());
    }

    #[test]
    fn categories_are_not_collinear() {
        let e = MockEmbedder::new(64);
        let vs: Vec<Vec<f64>> = VOC_CLASSES
            .iter()
            .map(|c| e.embed_text(c).unwrap().category_embedding)
            .collect();
        for i in 0..vs.len() {
            for j in i + 1..vs.len() {
                assert!(cosine(&vs[i], &vs[j]) < 1.0 - 1e-9);
            }
        }
    }

    #[test]
    fn audio_has_the_constructed_cosine() {
        for rho in [0.6, 0.0, 0.9] {
            let e = MockEmbedder::new(64).with_audio_text_cosine(rho);
            for c in VOC_CLASSES {
                let a = e.embed_audio(c).unwrap();
                let t = e.embed_text(c).unwrap().category_embedding;
                assert!((norm(&a) - 1.0).abs() < 1e-12);
                assert!((cosine(&a, &t) - rho).abs() < 1e-12, "{c}: {}", cosine(&a, &t));
            }
        }
        let e = MockEmbedder::new(16);
        assert_eq!(e.embed_audio("dog").unwrap(), e.embed_audio("dog").unwrap());
    }

    #[test]
    fn unknown_category_is_a_missing_fixture() {
        let e = MockEmbedder::new(8);
        assert!(matches!(e.embed_text("kangaroo"), Err(Error::MissingFixture { .. })));
        assert!(matches!(e.embed_audio("kangaroo"), Err(Error::MissingFixture { .. })));
        let f = FixtureEmbedder::default();
        assert!(matches!(f.embed_audio("dog"), Err(Error::MissingFixture { .. })));
    }

    #[test]
    fn fixture_checksum_and_dim_are_validated() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_fixture(dir.path(), "dog", EmbeddingRole::Audio, &[0.5, -0.25, 1.0]).unwrap();
        let (m, v) = read_fixture(&path).unwrap();
        assert_eq!(m.dim, 3);
        assert_eq!(v, vec![0.5, -0.25, 1.0]);

        let blob = dir.path().join(&m.blob_path);
        fs::write(&blob, [0u8; 12]).unwrap();
        assert!(matches!(read_fixture(&path), Err(Error::Fixture { .. })));

        let bytes: Vec<u8> = [1.0f32, 2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        fs::write(&blob, &bytes).unwrap();
        let mut m2 = m.clone();
        m2.sha256 = hex::encode(Sha256::digest(&bytes));
        fs::write(&path, serde_json::to_vec(&m2).unwrap()).unwrap();
        let err = read_fixture(&path).unwrap_err();
        assert!(err.to_string().contains("expected 12"), "{err}");
    }

    #[test]
    fn fixture_embedder_serves_all_roles() {
        let dir = tempfile::tempdir().unwrap();
        let mock = MockEmbedder::new(8);
        let t = mock.embed_text("cat").unwrap();
        write_fixture(dir.path(), "cat", EmbeddingRole::Category, &t.category_embedding).unwrap();
        write_fixture(dir.path(), "cat", EmbeddingRole::Descriptor, &t.descriptor_embedding).unwrap();
        write_fixture(dir.path(), "cat", EmbeddingRole::Background, &t.background_embedding).unwrap();
        write_fixture(dir.path(), "cat", EmbeddingRole::Audio, &mock.embed_audio("cat").unwrap()).unwrap();
        let f = FixtureEmbedder::from_dir(dir.path()).unwrap();
        assert_eq!(f.dim(), 8);
        let ft = f.embed_text("cat").unwrap();
        assert!(ft.descriptor_embedding.iter().zip(&t.descriptor_embedding).all(|(a, b)| (a - b).abs() < 1e-6));
        assert!(f.embed_text("dog").is_err());
    }
}
