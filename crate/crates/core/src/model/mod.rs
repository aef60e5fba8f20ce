//! The three parametric networks: the feature extractor with three DRLM
//! blocks, the meta learner with its adaptation layer, and the depth head.

mod checkpoint;
mod depth;
mod drlm;
mod extractor;
mod head;
pub mod ops;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MANIFEST, CHECKPOINT_PARAMS};
pub use depth::{depth_backward, depth_forward, DepthCache, DepthParams};
pub use drlm::{drlm_backward, drlm_forward, DrlmOutput, DrlmParams};
pub use extractor::{
    extractor_backward, extractor_forward, BlockParams, BlockTrace, ExtractorGrads,
    ExtractorParams, ExtractorTrace,
};
pub use head::{head_forward, head_objective, HeadDims, HeadEval, MetaLearnerParams};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data_synth::IMAGE_CHANNELS;
use crate::domain_repr::EntropyForm;
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: (usize, usize),
    pub in_channels: usize,
    /// Output channels of the three extractor blocks.
    pub channels: [usize; 3],
    /// DRLM reduction ratio τ.
    pub reduction: usize,
    /// Width of the meta learner's adaptation layer.
    pub adaptation_width: usize,
    pub depth_size: (usize, usize),
    pub depth_hidden: usize,
    /// ε inside the instance-norm and channel-statistics square roots.
    pub eps: f64,
    pub instance_norm: bool,
    pub entropy_form: EntropyForm,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: (32, 32),
            in_channels: IMAGE_CHANNELS,
            channels: [16, 32, 64],
            reduction: 4,
            adaptation_width: 32,
            depth_size: (8, 8),
            depth_hidden: 8,
            eps: 1e-5,
            instance_norm: true,
            entropy_form: EntropyForm::Symmetric,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (j, &c) in self.channels.iter().enumerate() {
            if c == 0 || c % 2 != 0 {
                return Err(Error::Config(format!(
                    "block {} has {c} channels; low-attention selection needs an even count",
                    j + 1
                )));
            }
            if c % self.reduction != 0 {
                return Err(Error::Config(format!(
                    "block {} channels {c} not divisible by reduction ratio {}",
                    j + 1,
                    self.reduction
                )));
            }
        }
        let (h, w) = self.image_size;
        if h % 8 != 0 || w % 8 != 0 || h < 16 || w < 16 {
            return Err(Error::Config(format!(
                "image size {h}x{w} must be >= 16 and a multiple of 8"
            )));
        }
        if self.adaptation_width == 0 || self.depth_hidden == 0 || self.reduction == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }

    pub fn embedding_width(&self) -> usize {
        self.channels[2]
    }

    pub fn head_dims(&self) -> HeadDims {
        HeadDims {
            embed: self.embedding_width(),
            hidden: self.adaptation_width,
        }
    }

    /// Spatial size of block `j`'s output (0-based).
    pub fn block_size(&self, j: usize) -> (usize, usize) {
        let s = 1 << (j + 1);
        (self.image_size.0 / s, self.image_size.1 / s)
    }

    /// Dimension of the domain feature: `Σ C_j` with channel selection,
    /// `2 Σ C_j` without.
    pub fn domain_feature_dim(&self, select: bool) -> usize {
        let s: usize = self.channels.iter().sum();
        if select {
            s
        } else {
            2 * s
        }
    }
}

/// θ_E, θ_M and θ_D together.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub extractor: ExtractorParams,
    pub meta: MetaLearnerParams,
    pub depth: DepthParams,
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut StreamRng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let mut t = Tensor::zeros(shape);
    for v in &mut t.data {
        *v = dist.sample(rng);
    }
    t.snap_f32();
    t
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, rng: &mut StreamRng) -> Result<Self> {
        cfg.validate()?;
        Ok(ModelParams {
            extractor: ExtractorParams::init(cfg, rng),
            meta: MetaLearnerParams::init(cfg.head_dims(), rng),
            depth: DepthParams::init(cfg, rng),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors_mut().into_iter().for_each(|t| t.data.iter_mut().for_each(|v| *v = 0.0));
        z
    }

    /// Named tensors in a fixed canonical order (extractor, meta, depth).
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (j, b) in self.extractor.blocks.iter().enumerate() {
            let p = format!("extractor.block{}", j + 1);
            out.push((format!("{p}.conv.weight"), &b.conv_weight));
            out.push((format!("{p}.conv.bias"), &b.conv_bias));
            out.push((format!("{p}.norm.gamma"), &b.norm_gamma));
            out.push((format!("{p}.norm.shift"), &b.norm_shift));
            out.push((format!("{p}.drlm.w1"), &b.drlm.w1));
            out.push((format!("{p}.drlm.w2"), &b.drlm.w2));
            out.push((format!("{p}.drlm.wp"), &b.drlm.wp));
        }
        out.push(("meta.hidden.weight".into(), &self.meta.hidden_weight));
        out.push(("meta.hidden.bias".into(), &self.meta.hidden_bias));
        out.push(("meta.out.weight".into(), &self.meta.out_weight));
        out.push(("meta.out.bias".into(), &self.meta.out_bias));
        out.push(("depth.conv1.weight".into(), &self.depth.conv1_weight));
        out.push(("depth.conv1.bias".into(), &self.depth.conv1_bias));
        out.push(("depth.conv2.weight".into(), &self.depth.conv2_weight));
        out.push(("depth.conv2.bias".into(), &self.depth.conv2_bias));
        out
    }

    /// Same order as [`ModelParams::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        for b in self.extractor.blocks.iter_mut() {
            out.push(&mut b.conv_weight);
            out.push(&mut b.conv_bias);
            out.push(&mut b.norm_gamma);
            out.push(&mut b.norm_shift);
            out.push(&mut b.drlm.w1);
            out.push(&mut b.drlm.w2);
            out.push(&mut b.drlm.wp);
        }
        out.push(&mut self.meta.hidden_weight);
        out.push(&mut self.meta.hidden_bias);
        out.push(&mut self.meta.out_weight);
        out.push(&mut self.meta.out_bias);
        out.push(&mut self.depth.conv1_weight);
        out.push(&mut self.depth.conv1_bias);
        out.push(&mut self.depth.conv2_weight);
        out.push(&mut self.depth.conv2_bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, t)| t.is_finite())
    }

    pub fn snap_f32(&mut self) {
        self.tensors_mut().into_iter().for_each(Tensor::snap_f32);
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Full training state that a checkpoint captures.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub params: ModelParams,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed meta-steps, used to key the episode and prior RNG streams.
    pub step: u64,
    pub seed: u64,
}

impl ModelState {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = crate::rng::stream(seed, crate::rng::Stream::Init, &[]);
        let params = ModelParams::init(&config, &mut rng)?;
        Ok(ModelState {
            config,
            params,
            epoch: 0,
            step: 0,
            seed,
        })
    }
}

#[allow(dead_code)]
pub(crate) fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut StreamRng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in &mut t.data {
        *v = rng.random_range(-bound..bound);
    }
    t.snap_f32();
    t
}
