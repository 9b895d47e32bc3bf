//! The full decompose → fuse → reconstruct pipeline for one episode.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::{FeatureExtractor, MaskDecoder, ProposalSet, RegionProposer, TextPayload};
use crate::autograd::{Graph, Var};
use crate::decompose::{average_decompositions, decompose_visual, VisualDecomposition, DEFAULT_TAU_OVERLAP};
use crate::error::{Error, Result};
use crate::fuse::{fuse, FuseConfig, FuseInputs, FuseParams, Modalities, Slot};
use crate::losses::{episode_objective, LossVars};
use crate::nn::ParamStore;
use crate::raster::{FeatureMap, Image, Mask};
use crate::reconstruct::{
    proposal_prior, proposal_similarities, reconstruct_mask, visual_prior, GeometricFusion, MaskLogits, Paths,
    Priors, PromptPack, Refiner, SemanticProjection, DEFAULT_DELTA,
};
use crate::tensor::Tensor;

/// Architecture sizes. Changing any of these invalidates a checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    /// Shared token dimension `d`.
    pub dim: usize,
    /// Backbone feature dimension.
    pub visual_dim: usize,
    /// Dense prompt channels.
    pub dense_dim: usize,
    /// Image pixels per feature cell.
    pub stride: usize,
    pub refiner_feature_channels: usize,
    pub refiner_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            dim: 64,
            visual_dim: 32,
            dense_dim: 16,
            stride: 4,
            refiner_feature_channels: 4,
            refiner_hidden: 8,
        }
    }
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.dense_dim == 0 || self.refiner_hidden == 0 || self.refiner_feature_channels == 0 {
            return Err(Error::config("model dimensions must be positive"));
        }
        if self.visual_dim < 4 {
            return Err(Error::config(format!("visual_dim must be at least 4, got {}", self.visual_dim)));
        }
        if !self.stride.is_power_of_two() {
            return Err(Error::config(format!("stride {} is not a power of two", self.stride)));
        }
        Ok(())
    }
}

/// Non-architectural pipeline settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub tau_overlap: f64,
    pub tau_temp: f64,
    pub infonce_include_positive: bool,
    pub delta_text: f64,
    pub delta_audio: f64,
    pub lambda: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            tau_overlap: DEFAULT_TAU_OVERLAP,
            tau_temp: crate::fuse::DEFAULT_TAU_TEMP,
            infonce_include_positive: false,
            delta_text: DEFAULT_DELTA,
            delta_audio: DEFAULT_DELTA,
            lambda: crate::losses::DEFAULT_LAMBDA,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_overlap > 0.0 && self.tau_overlap < 1.0) {
            return Err(Error::config(format!("tau_overlap {} outside (0, 1)", self.tau_overlap)));
        }
        if !(self.tau_temp > 0.0 && self.tau_temp.is_finite()) {
            return Err(Error::config(format!("tau_temp {} must be positive", self.tau_temp)));
        }
        for (name, d) in [("delta_text", self.delta_text), ("delta_audio", self.delta_audio)] {
            if !(-1.0..=1.0).contains(&d) {
                return Err(Error::config(format!("{name} {d} outside [-1, 1]")));
            }
        }
        crate::losses::validate_lambda(self.lambda)
    }

    fn fuse(&self) -> FuseConfig {
        FuseConfig {
            tau_temp: self.tau_temp,
            infonce_include_positive: self.infonce_include_positive,
        }
    }
}

/// Frozen adapter outputs for one image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreparedSample {
    pub features: FeatureMap,
    pub proposals: ProposalSet,
}

impl PreparedSample {
    pub fn new(image: &Image, backbone: &dyn FeatureExtractor, proposer: &dyn RegionProposer) -> Result<Self> {
        let features = backbone.extract(image)?;
        let proposals = proposer.propose(image, &features)?;
        Ok(Self { features, proposals })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpisodeInputs<'a> {
    pub query: &'a PreparedSample,
    pub image_size: (usize, usize),
    pub supports: &'a [(&'a PreparedSample, &'a Mask)],
    pub text: &'a TextPayload,
    pub audio: &'a [f64],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardOptions {
    pub modalities: Modalities,
    pub paths: Paths,
    /// Modalities removed by training-time dropout.
    pub dropped: Modalities,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            modalities: Modalities::ALL,
            paths: Paths::FULL,
            dropped: Modalities::NONE,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpisodeForward {
    pub logits: MaskLogits,
    pub contrastive: Option<Var>,
    pub priors: Priors,
    pub decomposition: Option<VisualDecomposition>,
    /// Modalities that actually reached the pipeline.
    pub effective: Modalities,
    pub hq_token: Option<Var>,
    pub sparse: Option<Var>,
}

/// All trainable modules of the pipeline.
#[derive(Debug, Clone)]
pub struct DfrModel {
    pub dims: ModelDims,
    pub fuse: FuseParams,
    pub hq: SemanticProjection,
    pub geometric: GeometricFusion,
    pub decoder: MaskDecoder,
    pub refiner: Refiner,
}

impl DfrModel {
    pub fn new(store: &mut ParamStore, dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        dims.validate()?;
        let fuse = FuseParams::new(store, dims.visual_dim, dims.dim, rng);
        let hq = SemanticProjection::new(store, dims.dim, rng);
        let geometric = GeometricFusion::new(store, dims.stride, dims.dense_dim, rng)?;
        let decoder = MaskDecoder::new(store, dims.dim, dims.visual_dim, dims.dense_dim, rng);
        let refiner = Refiner::new(
            store,
            dims.visual_dim,
            dims.refiner_feature_channels,
            dims.refiner_hidden,
            rng,
        );
        Ok(Self {
            dims,
            fuse,
            hq,
            geometric,
            decoder,
            refiner,
        })
    }

    /// Visual prototypes of the supports, averaged over shots.
    pub fn decompose(&self, supports: &[(&PreparedSample, &Mask)], tau_overlap: f64) -> Result<Option<VisualDecomposition>> {
        let parts = supports
            .iter()
            .map(|(s, m)| decompose_visual(&s.features, m, &s.proposals, tau_overlap))
            .collect::<Result<Vec<_>>>()?;
        Ok(average_decompositions(&parts))
    }

    /// Location priors for the active modalities; inactive ones are blank.
    pub fn priors(
        &self,
        store: &ParamStore,
        inputs: &EpisodeInputs<'_>,
        vis: Option<&VisualDecomposition>,
        active: Modalities,
        cfg: &PipelineConfig,
    ) -> Result<Priors> {
        let (h, w) = inputs.image_size;
        let q = inputs.query;
        let mut priors = Priors::blank(h, w);
        if let (true, Some(v)) = (active.visual, vis) {
            match visual_prior(&q.features, &v.f_s, h, w) {
                Ok(p) => priors.visual = p,
                Err(Error::Prior(msg)) => log::warn!("visual prior unavailable ({msg}); using 0.5"),
                Err(e) => return Err(e),
            }
        }
        let proj = &self.fuse.visual_proj;
        if active.text {
            let sims = proposal_similarities(store, proj, &q.proposals, &inputs.text.category_embedding)?;
            priors.text = proposal_prior(&q.proposals.masks, &sims, cfg.delta_text)?;
        }
        if active.audio {
            let sims = proposal_similarities(store, proj, &q.proposals, inputs.audio)?;
            priors.audio = proposal_prior(&q.proposals.masks, &sims, cfg.delta_audio)?;
        }
        Ok(priors)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &EpisodeInputs<'_>,
        opts: &ForwardOptions,
        cfg: &PipelineConfig,
    ) -> Result<EpisodeForward> {
        if !opts.modalities.any() {
            return Err(Error::config("at least one modality must be enabled"));
        }
        if !(opts.paths.semantic || opts.paths.geometric) {
            return Err(Error::config("at least one reconstruction path must be enabled"));
        }
        let (h, w) = inputs.image_size;
        let fq = &inputs.query.features;
        if fq.dim != self.dims.visual_dim || fq.height * self.dims.stride != h || fq.width * self.dims.stride != w {
            return Err(Error::config(format!(
                "query features {}×{}×{} do not match image {h}×{w} at stride {} and dim {}",
                fq.height, fq.width, fq.dim, self.dims.stride, self.dims.visual_dim
            )));
        }
        let present = Modalities {
            visual: opts.modalities.visual && !inputs.supports.is_empty(),
            ..opts.modalities
        };
        let vis = if present.visual {
            self.decompose(inputs.supports, cfg.tau_overlap)?
        } else {
            None
        };
        let fused = fuse(
            g,
            store,
            &self.fuse,
            &cfg.fuse(),
            &FuseInputs {
                visual: vis.as_ref().filter(|_| present.visual),
                text: present.text.then_some(inputs.text),
                audio: present.audio.then_some(inputs.audio),
            },
            opts.dropped,
        )?;
        let effective = Modalities {
            visual: present.visual && !opts.dropped.visual,
            text: present.text && !opts.dropped.text,
            audio: present.audio && !opts.dropped.audio,
        };
        let priors = self.priors(store, inputs, vis.as_ref(), effective, cfg)?;

        let (hq_token, sparse) = if opts.paths.semantic {
            let tp_row = fused.row_of(Slot::TokenPos).expect("learned tokens are never dropped");
            let tn_row = fused.row_of(Slot::TokenNeg).expect("learned tokens are never dropped");
            let tp = g.select_rows(fused.fg_attended, &[tp_row]);
            let tn = g.select_rows(fused.bg_attended, &[tn_row]);
            (Some(self.hq.project(g, store, tp, tn)?), Some(fused.fg_attended))
        } else {
            (None, None)
        };
        let dense = if opts.paths.geometric {
            Some(self.geometric.fuse(g, store, &priors)?)
        } else {
            None
        };
        let features = g.constant(Tensor::new([fq.cells(), fq.dim], fq.data.clone()));
        let pack = PromptPack {
            hq_token,
            sparse,
            dense,
            priors,
        };
        let logits = reconstruct_mask(
            g,
            store,
            &pack,
            features,
            (fq.height, fq.width),
            &self.decoder,
            &self.refiner,
        )?;
        Ok(EpisodeForward {
            logits,
            contrastive: fused.contrastive,
            priors: pack.priors,
            decomposition: vis,
            effective,
            hq_token,
            sparse,
        })
    }

    /// Forward pass plus the training objective against `target`.
    pub fn loss(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        inputs: &EpisodeInputs<'_>,
        opts: &ForwardOptions,
        cfg: &PipelineConfig,
        target: &Mask,
    ) -> Result<(EpisodeForward, LossVars)> {
        let fwd = self.forward(g, store, inputs, opts, cfg)?;
        let vars = episode_objective(g, fwd.logits, target, fwd.contrastive, cfg.lambda);
        Ok((fwd, vars))
    }
}
