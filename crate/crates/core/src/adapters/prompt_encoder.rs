use rand::Rng;

use crate::autograd::{Conv2dSpec, Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::tensor::Tensor;

/// Trainable mask prompt encoder: `log2(stride)` stride-2 2×2 convolutions
/// with ReLU, then a 1×1 projection to `dense_dim` channels. Maps an `H × W`
/// prior to a `dense_dim × H/s × W/s` grid.
#[derive(Debug, Clone)]
pub struct MaskPromptEncoder {
    stages: Vec<Conv2d>,
    project: Conv2d,
    stride: usize,
    dense_dim: usize,
}

impl MaskPromptEncoder {
    pub fn new(store: &mut ParamStore, stride: usize, dense_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if !stride.is_power_of_two() {
            return Err(Error::config(format!("prompt encoder stride {stride} is not a power of two")));
        }
        let levels = stride.trailing_zeros() as usize;
        let mut stages = Vec::with_capacity(levels);
        let mut channels = 1;
        for i in 0..levels {
            let out = (4 << i).min(16);
            stages.push(Conv2d::new(
                store,
                &format!("prompt_encoder.stage{i}"),
                channels,
                out,
                2,
                Conv2dSpec { stride: 2, padding: 0 },
                false,
                rng,
            ));
            channels = out;
        }
        let project = Conv2d::new(
            store,
            "prompt_encoder.project",
            channels,
            dense_dim,
            1,
            Conv2dSpec { stride: 1, padding: 0 },
            false,
            rng,
        );
        Ok(Self {
            stages,
            project,
            stride,
            dense_dim,
        })
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn dense_dim(&self) -> usize {
        self.dense_dim
    }

    /// Validate a prior and lift it into `graph` as a `1 × H × W` constant.
    pub fn prior_input(&self, graph: &mut Graph, prior: &[f64], height: usize, width: usize) -> Result<Var> {
        if prior.len() != height * width {
            return Err(Error::Input(format!(
                "prior has {} values, expected {height}×{width}",
                prior.len()
            )));
        }
        if let Some(v) = prior.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Input(format!("prior value {v} outside [0, 1]")));
        }
        if !height.is_multiple_of(self.stride) || !width.is_multiple_of(self.stride) {
            return Err(Error::config(format!(
                "prior {height}×{width} not divisible by stride {}",
                self.stride
            )));
        }
        Ok(graph.constant(Tensor::new([1, height, width], prior.to_vec())))
    }

    pub fn forward(&self, graph: &mut Graph, store: &ParamStore, prior: Var) -> Var {
        let mut x = prior;
        for stage in &self.stages {
            x = stage.forward(graph, store, x);
            x = graph.relu(x);
        }
        self.project.forward(graph, store, x)
    }

    /// Encode a prior map given as plain values.
    pub fn encode(
        &self,
        graph: &mut Graph,
        store: &ParamStore,
        prior: &[f64],
        height: usize,
        width: usize,
    ) -> Result<Var> {
        let x = self.prior_input(graph, prior, height, width)?;
        Ok(self.forward(graph, store, x))
    }
}
