use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};

use super::config::RunConfig;
use super::data::{EpisodeRef, Workspace};
use crate::autograd::{sigmoid, Graph};
use crate::error::{Error, Result};
use crate::fuse::Modalities;
use crate::model::{DfrModel, ForwardOptions};
use crate::nn::ParamStore;

fn gray(values: &[f64], h: usize, w: usize) -> GrayImage {
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        let v = values[y as usize * w + x as usize].clamp(0.0, 1.0);
        Luma([(v * 255.0).round() as u8])
    })
}

/// Write the query, its mask, the three location priors and both predicted
/// probability maps of `ep` as PNGs under `dir`. Returns the written paths.
pub fn dump_priors(
    config: &RunConfig,
    ws: &Workspace,
    model: &DfrModel,
    store: &ParamStore,
    ep: &EpisodeRef,
    dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let supports = ws.supports(ep);
    let inputs = ws.inputs(ep, &supports)?;
    let opts = ForwardOptions {
        modalities: config.modalities,
        paths: config.paths,
        dropped: Modalities::NONE,
    };
    let mut g = Graph::new();
    let fwd = model.forward(&mut g, store, &inputs, &opts, &config.pipeline)?;
    let (h, w) = ws.image_size;
    let prob = |v| -> Vec<f64> { g.value(v).data().iter().map(|&z| sigmoid(z)).collect() };
    let query = &ws.dataset.samples[ep.query];
    let maps = [
        ("prior_visual.png", fwd.priors.visual.clone()),
        ("prior_text.png", fwd.priors.text.clone()),
        ("prior_audio.png", fwd.priors.audio.clone()),
        ("mask_init.png", prob(fwd.logits.init)),
        ("mask_pred.png", prob(fwd.logits.pred)),
        ("target.png", query.mask.as_f64()),
    ];
    let mut written = Vec::new();
    for (name, values) in maps {
        let p = dir.join(name);
        gray(&values, h, w).save(&p)?;
        written.push(p);
    }
    let rgb = RgbImage::from_raw(w as u32, h as u32, query.image.data.clone())
        .ok_or_else(|| Error::Dataset("query image buffer has the wrong size".into()))?;
    let p = dir.join("query.png");
    rgb.save(&p)?;
    written.push(p);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::{tests::tiny_config, TrainState};

    #[test]
    fn writes_one_png_per_map() {
        let cfg = tiny_config();
        let ws = Workspace::new(&cfg).unwrap();
        let st = TrainState::new(&cfg).unwrap();
        let ep = ws
            .eval_episode(cfg.eval.target, cfg.shots, cfg.seed, ws.split.novel_classes[0], 0)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = dump_priors(&cfg, &ws, &st.model, &st.store, &ep, dir.path()).unwrap();
        assert_eq!(files.len(), 7);
        for f in &files {
            let img = image::open(f).unwrap();
            assert_eq!((img.height(), img.width()), (32, 32));
        }
    }
}
