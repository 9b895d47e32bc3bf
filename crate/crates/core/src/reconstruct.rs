//! Dual-path reconstruction: the projected high-quality token and sparse
//! semantic prompts, the three location priors and their fused dense
//! prompt, then decoding and refinement.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{cosine, DecoderInputs, MaskDecoder, MaskPromptEncoder, ProposalSet};
use crate::autograd::{sigmoid, Conv2dSpec, Graph, Resample, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, Linear, ParamStore};
use crate::raster::{FeatureMap, Mask};
pub const DEFAULT_DELTA: f64 = 0.5;

/// `g = ReLU(Wᵀ[token_pos; token_neg] + b)` with `W: 2d × d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SemanticProjection {
    pub linear: Linear,
}

impl SemanticProjection {
    pub fn new(store: &mut ParamStore, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new(store, "reconstruct.hq_proj", 2 * dim, dim, true, rng),
        }
    }

    pub fn project(&self, g: &mut Graph, store: &ParamStore, token_pos: Var, token_neg: Var) -> Result<Var> {
        let d = self.linear.output_dim;
        for (v, what) in [(token_pos, "token_pos"), (token_neg, "token_neg")] {
            if g.value(v).len() != d {
                return Err(Error::config(format!(
                    "{what} has {} values, projection expects {d}",
                    g.value(v).len()
                )));
            }
        }
        let tp = g.reshape(token_pos, [1, d]);
        let tn = g.reshape(token_neg, [1, d]);
        let both = g.concat(&[tp, tn]);
        let joined = g.reshape(both, [1, 2 * d]);
        let z = self.linear.forward(g, store, joined);
        Ok(g.relu(z))
    }
}

/// Per-cell `σ(cos(F_q, f_s))`, bilinearly upsampled to `out_h × out_w`.
pub fn visual_prior(features: &FeatureMap, prototype: &[f64], out_h: usize, out_w: usize) -> Result<Vec<f64>> {
    if prototype.len() != features.dim {
        return Err(Error::Prior(format!(
            "prototype has dim {}, features {}",
            prototype.len(),
            features.dim
        )));
    }
    if prototype.iter().all(|v| *v == 0.0) {
        return Err(Error::Prior("zero prototype".into()));
    }
    let low: Vec<f64> = (0..features.cells())
        .map(|i| sigmoid(cosine(features.cell(i), prototype)))
        .collect();
    Ok(Resample::bilinear(features.height, features.width, out_h, out_w).apply(&low))
}

/// Union of the proposals whose similarity exceeds `delta`, as 0/1 values.
pub fn proposal_prior(masks: &[Mask], similarities: &[f64], delta: f64) -> Result<Vec<f64>> {
    let first = masks
        .first()
        .ok_or_else(|| Error::Input("proposal set is empty".into()))?;
    if masks.len() != similarities.len() {
        return Err(Error::Input(format!(
            "{} proposals but {} similarities",
            masks.len(),
            similarities.len()
        )));
    }
    let mut out = vec![0.0; first.height * first.width];
    for (m, &s) in masks.iter().zip(similarities) {
        if s > delta {
            for (o, &on) in out.iter_mut().zip(&m.data) {
                if on {
                    *o = 1.0;
                }
            }
        }
    }
    Ok(out)
}

/// Cosine of each proposal's projected pooled feature with `reference`.
pub fn proposal_similarities(
    store: &ParamStore,
    projection: &Linear,
    proposals: &ProposalSet,
    reference: &[f64],
) -> Result<Vec<f64>> {
    if reference.len() != projection.output_dim {
        return Err(Error::config(format!(
            "reference has dim {}, projection outputs {}",
            reference.len(),
            projection.output_dim
        )));
    }
    Ok(proposals
        .pooled_features
        .iter()
        .map(|f| cosine(&projection.apply(store, f), reference))
        .collect())
}

/// The three location priors, each `H × W` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Priors {
    pub height: usize,
    pub width: usize,
    pub visual: Vec<f64>,
    pub text: Vec<f64>,
    pub audio: Vec<f64>,
}

impl Priors {
    /// Stand-ins for absent modalities: uniform 0.5 for the visual prior and
    /// zeros for the proposal priors.
    pub fn blank(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            visual: vec![0.5; height * width],
            text: vec![0.0; height * width],
            audio: vec![0.0; height * width],
        }
    }
}

/// Shared prompt encoder applied to each prior, channel concatenation, then a
/// 3×3 convolution down to `dense_dim` channels.
#[derive(Debug, Clone)]
pub struct GeometricFusion {
    pub encoder: MaskPromptEncoder,
    pub conv: Conv2d,
}

impl GeometricFusion {
    pub fn new(store: &mut ParamStore, stride: usize, dense_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let encoder = MaskPromptEncoder::new(store, stride, dense_dim, rng)?;
        let conv = Conv2d::new(
            store,
            "reconstruct.geo_fuse",
            3 * dense_dim,
            dense_dim,
            3,
            Conv2dSpec { stride: 1, padding: 1 },
            false,
            rng,
        );
        Ok(Self { encoder, conv })
    }

    pub fn fuse(&self, g: &mut Graph, store: &ParamStore, priors: &Priors) -> Result<Var> {
        let n = priors.height * priors.width;
        if priors.visual.len() != n || priors.text.len() != n || priors.audio.len() != n {
            return Err(Error::config("priors differ in shape"));
        }
        let (h, w) = (priors.height, priors.width);
        let ev = self.encoder.encode(g, store, &priors.visual, h, w)?;
        let et = self.encoder.encode(g, store, &priors.text, h, w)?;
        let ea = self.encoder.encode(g, store, &priors.audio, h, w)?;
        let stacked = g.concat(&[ev, et, ea]);
        Ok(self.conv.forward(g, store, stacked))
    }
}

/// Residual convolutional head on `[M_init ⊕ up(F_q W)]`. The last layer
/// starts at zero so the head is the identity on `M_init` at init.
#[derive(Debug, Clone)]
pub struct Refiner {
    pub feature_proj: Linear,
    pub layers: Vec<Conv2d>,
}

impl Refiner {
    pub fn new(store: &mut ParamStore, feature_dim: usize, feat_channels: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let feature_proj = Linear::new(store, "refiner.feature_proj", feature_dim, feat_channels, true, rng);
        let spec = Conv2dSpec { stride: 1, padding: 1 };
        let layers = vec![
            Conv2d::new(store, "refiner.conv0", 1 + feat_channels, hidden, 3, spec, false, rng),
            Conv2d::new(store, "refiner.conv1", hidden, hidden, 3, spec, false, rng),
            Conv2d::new(store, "refiner.conv2", hidden, 1, 3, spec, true, rng),
        ];
        Self { feature_proj, layers }
    }

    /// `init`: `1 × H × W` logits; `features`: `(h·w) × d_vis`.
    pub fn refine(&self, g: &mut Graph, store: &ParamStore, init: Var, features: Var, grid: (usize, usize)) -> Var {
        let shape = g.value(init).shape().to_vec();
        let (oh, ow) = (shape[1], shape[2]);
        let c = self.feature_proj.output_dim;
        let f = self.feature_proj.forward(g, store, features);
        let f = g.transpose(f);
        let f = g.reshape(f, [c, grid.0, grid.1]);
        let f = g.resample(f, Arc::new(Resample::bilinear(grid.0, grid.1, oh, ow)));
        let mut x = g.concat(&[init, f]);
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x);
            if i < last {
                x = g.relu(x);
            }
        }
        g.add(init, x)
    }
}

/// Which prompt paths feed the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct Paths {
    pub semantic: bool,
    pub geometric: bool,
}

impl Paths {
    pub const FULL: Paths = Paths {
        semantic: true,
        geometric: true,
    };

    pub fn label(&self) -> &'static str {
        match (self.semantic, self.geometric) {
            (true, true) => "full",
            (true, false) => "semantic-only",
            (false, true) => "geometric-only",
            (false, false) => "none",
        }
    }
}

impl Default for Paths {
    fn default() -> Self {
        Self::FULL
    }
}

/// Assembled prompts for the decoder.
#[derive(Debug, Clone)]
pub struct PromptPack {
    pub hq_token: Option<Var>,
    pub sparse: Option<Var>,
    pub dense: Option<Var>,
    pub priors: Priors,
}

#[derive(Debug, Clone, Copy)]
pub struct MaskLogits {
    pub init: Var,
    pub pred: Var,
}

pub fn reconstruct_mask(
    g: &mut Graph,
    store: &ParamStore,
    pack: &PromptPack,
    features: Var,
    grid: (usize, usize),
    decoder: &MaskDecoder,
    refiner: &Refiner,
) -> Result<MaskLogits> {
    let init = decoder.decode(
        g,
        store,
        DecoderInputs {
            output_token: pack.hq_token,
            sparse: pack.sparse,
            dense: pack.dense,
            features,
            grid,
            output_size: (pack.priors.height, pack.priors.width),
        },
    )?;
    let pred = refiner.refine(g, store, init, features, grid);
    Ok(MaskLogits { init, pred })
}
