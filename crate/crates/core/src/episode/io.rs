//! On-disk dataset layout: one directory per class holding RGB PNG images and
//! single-channel 0/255 PNG masks, plus `manifest.json` at the root.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{ClassInfo, Dataset, Sample};
use crate::adapters::{write_fixture, ModalityEmbedder, EmbeddingRole};
use crate::error::{Error, Result};
use crate::raster::{Image, Mask};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "mmfs-dataset";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub classes: Vec<ManifestClass>,
    pub samples: Vec<ManifestSample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestClass {
    pub id: u32,
    pub name: String,
    /// Embedding fixture manifests keyed by role name, relative to the root.
    #[serde(default)]
    pub fixtures: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSample {
    pub class_id: u32,
    pub image: PathBuf,
    pub mask: PathBuf,
}

fn class_dir(c: &ClassInfo) -> String {
    format!("{:02}_{}", c.id, c.name)
}

/// Write `dataset` under `root`. When `payloads` is given, every class also
/// gets text and audio embedding fixtures.
pub fn save_dataset(
    dataset: &Dataset,
    root: &Path,
    payloads: Option<&dyn ModalityEmbedder>,
) -> Result<DatasetManifest> {
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut classes = Vec::new();
    for c in &dataset.classes {
        let dir = root.join(class_dir(c));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut fixtures = BTreeMap::new();
        if let Some(p) = payloads {
            let text = p.embed_text(&c.name)?;
            let audio = p.embed_audio(&c.name)?;
            let fixture_dir = root.join("fixtures");
            for (role, v) in [
                (EmbeddingRole::Category, &text.category_embedding),
                (EmbeddingRole::Descriptor, &text.descriptor_embedding),
                (EmbeddingRole::Background, &text.background_embedding),
                (EmbeddingRole::Audio, &audio),
            ] {
                let manifest = write_fixture(&fixture_dir, &c.name, role, v)?;
                let rel = manifest.strip_prefix(root).unwrap_or(&manifest).to_path_buf();
                fixtures.insert(role.as_str().to_string(), rel);
            }
        }
        classes.push(ManifestClass {
            id: c.id,
            name: c.name.clone(),
            fixtures,
        });
    }

    let mut counters: BTreeMap<u32, usize> = BTreeMap::new();
    let mut samples = Vec::with_capacity(dataset.samples.len());
    for s in &dataset.samples {
        let c = dataset
            .classes
            .iter()
            .find(|c| c.id == s.class_id)
            .ok_or_else(|| Error::Dataset(format!("sample of unknown class {}", s.class_id)))?;
        let n = counters.entry(c.id).or_default();
        let image = PathBuf::from(class_dir(c)).join(format!("{n:04}.png"));
        let mask = PathBuf::from(class_dir(c)).join(format!("{n:04}_mask.png"));
        *n += 1;

        let rgb = RgbImage::from_raw(s.image.width as u32, s.image.height as u32, s.image.data.clone())
            .ok_or_else(|| Error::Dataset("image buffer size".into()))?;
        rgb.save(root.join(&image))?;
        let grey = GrayImage::from_raw(
            s.mask.width as u32,
            s.mask.height as u32,
            s.mask.data.iter().map(|&b| if b { 255 } else { 0 }).collect(),
        )
        .ok_or_else(|| Error::Dataset("mask buffer size".into()))?;
        grey.save(root.join(&mask))?;
        samples.push(ManifestSample {
            class_id: c.id,
            image,
            mask,
        });
    }

    let manifest = DatasetManifest {
        format: FORMAT.into(),
        version: VERSION,
        classes,
        samples,
    };
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn load_dataset(root: &Path) -> Result<(Dataset, DatasetManifest)> {
    let path = root.join(MANIFEST_FILE);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_slice(&bytes)?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Dataset(format!(
            "unsupported manifest {} v{}",
            manifest.format, manifest.version
        )));
    }
    let classes: Vec<ClassInfo> = manifest
        .classes
        .iter()
        .map(|c| ClassInfo {
            id: c.id,
            name: c.name.clone(),
        })
        .collect();
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for s in &manifest.samples {
        if !classes.iter().any(|c| c.id == s.class_id) {
            return Err(Error::Dataset(format!("sample of unknown class {}", s.class_id)));
        }
        let rgb = image::open(root.join(&s.image))?.to_rgb8();
        let grey = image::open(root.join(&s.mask))?.to_luma8();
        if rgb.dimensions() != grey.dimensions() {
            return Err(Error::Dataset(format!(
                "{} and its mask differ in size",
                s.image.display()
            )));
        }
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut mask = Vec::with_capacity(w * h);
        for &v in grey.as_raw() {
            match v {
                0 => mask.push(false),
                255 => mask.push(true),
                other => {
                    return Err(Error::Dataset(format!(
                        "{} is not binary (value {other})",
                        s.mask.display()
                    )))
                }
            }
        }
        samples.push(Sample {
            class_id: s.class_id,
            image: Image::new(h, w, rgb.into_raw()),
            mask: Mask::new(h, w, mask),
        });
    }
    Ok((Dataset { classes, samples }, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{FixtureEmbedder, MockEmbedder};
    use crate::episode::{generate_synthetic_dataset, SyntheticDatasetSpec};

    #[test]
    fn disk_round_trip_with_fixtures() {
        let ds = generate_synthetic_dataset(&SyntheticDatasetSpec {
            image_size: 32,
            samples_per_class: 3,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mock = MockEmbedder::new(8);
        save_dataset(&ds, dir.path(), Some(&mock)).unwrap();
        let (back, manifest) = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        assert_eq!(manifest.classes[0].fixtures.len(), 4);

        let fixtures = FixtureEmbedder::from_manifest(dir.path(), &manifest).unwrap();
        let t = fixtures.embed_text("aeroplane").unwrap();
        let m = mock.embed_text("aeroplane").unwrap();
        for (a, b) in t.category_embedding.iter().zip(&m.category_embedding) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let ds = generate_synthetic_dataset(&SyntheticDatasetSpec {
            image_size: 16,
            distractors: 0,
            samples_per_class: 2,
            ..Default::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = save_dataset(&ds, dir.path(), None).unwrap();
        let grey = GrayImage::from_pixel(16, 16, image::Luma([7]));
        grey.save(dir.path().join(&manifest.samples[0].mask)).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Dataset(_))));
    }
}
