use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{EvalTarget, RunConfig};
use super::data::{EpisodeRef, Workspace};
use crate::autograd::Graph;
use crate::error::{Error, Result};
use crate::fuse::Modalities;
use crate::metrics::{binarize, MetricAccumulator};
use crate::model::{DfrModel, ForwardOptions};
use crate::nn::ParamStore;
use crate::raster::Mask;
use crate::reconstruct::Paths;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub class_id: u32,
    pub name: String,
    pub iou: f64,
    pub episodes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fold: usize,
    pub shots: usize,
    pub seed: u64,
    pub config_hash: String,
    pub target: EvalTarget,
    pub modalities: Modalities,
    pub paths: Paths,
    pub classes: Vec<ClassScore>,
    pub miou: f64,
    pub fb_iou: f64,
    pub episodes: u64,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Binarised refined prediction for one episode, with dropout off.
pub fn predict(
    config: &RunConfig,
    ws: &Workspace,
    model: &DfrModel,
    store: &ParamStore,
    ep: &EpisodeRef,
) -> Result<Mask> {
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
    Ok(binarize(g.value(fwd.logits.pred).data(), h, w))
}

/// The fixed evaluation episode list for `config`.
pub fn eval_episodes(config: &RunConfig, ws: &Workspace) -> Result<Vec<EpisodeRef>> {
    let t = config.eval.target;
    let mut out = Vec::new();
    for c in ws.eval_classes(t) {
        for i in 0..config.eval.episodes_per_class {
            out.push(ws.eval_episode(t, config.shots, config.seed, c, i)?);
        }
    }
    Ok(out)
}

pub fn evaluate(config: &RunConfig, ws: &Workspace, model: &DfrModel, store: &ParamStore) -> Result<EvalReport> {
    config.validate()?;
    let episodes = eval_episodes(config, ws)?;
    let preds = episodes
        .par_iter()
        .map(|ep| predict(config, ws, model, store, ep))
        .collect::<Result<Vec<_>>>()?;
    let mut acc = MetricAccumulator::new();
    for (ep, pred) in episodes.iter().zip(&preds) {
        acc.add(ep.class_id, pred, ws.target(ep));
    }
    let classes = acc
        .per_class
        .iter()
        .map(|(&c, n)| {
            Ok(ClassScore {
                class_id: c,
                name: ws.dataset.class_name(c)?.to_string(),
                iou: n.iou(),
                episodes: episodes.iter().filter(|e| e.class_id == c).count() as u64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        fold: config.fold,
        shots: config.shots,
        seed: config.seed,
        config_hash: config.fingerprint(),
        target: config.eval.target,
        modalities: config.modalities,
        paths: config.paths,
        classes,
        miou: acc.miou(),
        fb_iou: acc.fb_iou(),
        episodes: acc.episodes,
    })
}
