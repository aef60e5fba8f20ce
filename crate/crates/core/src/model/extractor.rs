use crate::domain_repr::{entropy_loss_from_logit, EntropyForm};
use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{FeatureMap, Tensor};

use super::drlm::{drlm_backward, drlm_forward, DrlmOutput, DrlmParams};
use super::ops::{
    avg_pool2, avg_pool2_backward, conv3x3, conv3x3_backward, instance_norm,
    instance_norm_backward, pad1, relu_backward_inplace, relu_inplace, NormCache,
};
use super::{normal_tensor, ModelConfig};

/// One block: 3×3 conv → instance norm → ReLU → 2×2 average pool → DRLM.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams {
    pub conv_weight: Tensor,
    pub conv_bias: Tensor,
    pub norm_gamma: Tensor,
    pub norm_shift: Tensor,
    pub drlm: DrlmParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExtractorParams {
    pub blocks: Vec<BlockParams>,
}

/// Gradients share the parameter layout.
pub type ExtractorGrads = ExtractorParams;

impl ExtractorParams {
    pub fn init(cfg: &ModelConfig, rng: &mut StreamRng) -> Self {
        let mut c_in = cfg.in_channels;
        let blocks = cfg
            .channels
            .iter()
            .map(|&c| {
                let b = BlockParams {
                    conv_weight: normal_tensor(&[c, c_in, 3, 3], (2.0 / (9 * c_in) as f64).sqrt(), rng),
                    conv_bias: Tensor::zeros(&[c]),
                    norm_gamma: Tensor::filled(&[c], 1.0),
                    norm_shift: Tensor::zeros(&[c]),
                    drlm: DrlmParams::init(c, cfg.reduction, rng),
                };
                c_in = c;
                b
            })
            .collect();
        ExtractorParams { blocks }
    }
}

#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub padded_input: FeatureMap,
    pub norm: Option<NormCache>,
    /// Input of the ReLU.
    pub pre_relu: FeatureMap,
    /// Block output `F` before the gate.
    pub f: FeatureMap,
    pub drlm: DrlmOutput,
    /// Logit `W_p · gap(F−)` of the entropy head.
    pub entropy_logit: f64,
}

impl BlockTrace {
    pub fn attention(&self) -> &[f64] {
        &self.drlm.attention
    }

    pub fn f_plus(&self) -> &FeatureMap {
        &self.drlm.f_plus
    }

    pub fn f_minus(&self) -> &FeatureMap {
        &self.drlm.f_minus
    }
}

#[derive(Debug, Clone)]
pub struct ExtractorTrace {
    pub blocks: Vec<BlockTrace>,
    /// Global average pool of block-3 `F+`.
    pub embedding: Vec<f64>,
}

impl ExtractorTrace {
    /// Per-block domain enhancement entropy losses for this sample.
    pub fn entropy_losses(&self, form: EntropyForm) -> [f64; 3] {
        let mut out = [0.0; 3];
        for (o, b) in out.iter_mut().zip(&self.blocks) {
            *o = entropy_loss_from_logit(b.entropy_logit, form).0;
        }
        out
    }
}

/// Forward pass for one image (`C_in × H × W`, channel-planar).
pub fn extractor_forward(
    params: &ExtractorParams,
    cfg: &ModelConfig,
    image: &[f32],
) -> Result<ExtractorTrace> {
    let (h, w) = cfg.image_size;
    let expected = cfg.in_channels * h * w;
    if image.len() != expected {
        return Err(Error::shape("extractor_forward", expected, image.len()));
    }
    let mut x = FeatureMap::from_vec(
        cfg.in_channels,
        h,
        w,
        image.iter().map(|&v| v as f64).collect(),
    );
    let mut blocks = Vec::with_capacity(params.blocks.len());
    for (j, bp) in params.blocks.iter().enumerate() {
        if x.channels != bp.conv_weight.shape[1] {
            return Err(Error::shape(
                "extractor_forward",
                bp.conv_weight.shape[1],
                x.channels,
            ));
        }
        let padded_input = pad1(&x);
        let z = conv3x3(&padded_input, &bp.conv_weight, &bp.conv_bias);
        let (pre_relu, norm) = if cfg.instance_norm {
            let (n, cache) = instance_norm(&z, &bp.norm_gamma, &bp.norm_shift, cfg.eps);
            (n, Some(cache))
        } else {
            (z, None)
        };
        // Checked before the ReLU, which would map NaN to 0.
        if !pre_relu.data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFiniteActivation { block: j + 1 });
        }
        let mut r = pre_relu.clone();
        relu_inplace(&mut r);
        let f = avg_pool2(&r);
        let drlm = drlm_forward(&f, &bp.drlm)?;
        let entropy_logit = drlm
            .f_minus
            .gap()
            .iter()
            .zip(&bp.drlm.wp.data)
            .map(|(q, w)| q * w)
            .sum();
        x = drlm.f_plus.clone();
        blocks.push(BlockTrace {
            padded_input,
            norm,
            pre_relu,
            f,
            drlm,
            entropy_logit,
        });
    }
    let embedding = x.gap();
    Ok(ExtractorTrace { blocks, embedding })
}

/// Backward through the extractor for one sample.
///
/// * `d_embedding` — gradient on the embedding.
/// * `d_fplus_extra[j]` — additional gradient on block `j`'s `F+` (the depth
///   head taps block 2).
/// * `d_entropy_logit[j]` — gradient on block `j`'s entropy logit.
pub fn extractor_backward(
    params: &ExtractorParams,
    trace: &ExtractorTrace,
    d_embedding: &[f64],
    d_fplus_extra: [Option<&FeatureMap>; 3],
    d_entropy_logit: [f64; 3],
    grads: &mut ExtractorGrads,
) {
    let nb = params.blocks.len();
    let last = &trace.blocks[nb - 1];
    let n_last = last.f.plane_len() as f64;
    let mut d_fplus = FeatureMap::zeros(last.f.channels, last.f.height, last.f.width);
    for c in 0..last.f.channels {
        let g = d_embedding[c] / n_last;
        d_fplus.channel_mut(c).iter_mut().for_each(|v| *v = g);
    }
    for j in (0..nb).rev() {
        let bp = &params.blocks[j];
        let bt = &trace.blocks[j];
        let bg = &mut grads.blocks[j];
        if let Some(extra) = d_fplus_extra[j] {
            for (d, e) in d_fplus.data.iter_mut().zip(&extra.data) {
                *d += e;
            }
        }
        let dz_logit = d_entropy_logit[j];
        let dq: Vec<f64> = bp.drlm.wp.data.iter().map(|w| w * dz_logit).collect();
        if dz_logit != 0.0 {
            let c = bt.f.channels;
            for ch in 0..c {
                let q = (1.0 - bt.drlm.attention[ch]) * bt.drlm.pooled[ch];
                bg.drlm.wp.data[ch] += dz_logit * q;
            }
        }
        let df = drlm_backward(&bt.f, &bp.drlm, &bt.drlm, &d_fplus, Some(&dq), &mut bg.drlm);
        let mut dr = avg_pool2_backward(&df);
        relu_backward_inplace(&bt.pre_relu, &mut dr);
        let dz = match &bt.norm {
            Some(cache) => instance_norm_backward(
                cache,
                &bp.norm_gamma,
                &dr,
                &mut bg.norm_gamma,
                &mut bg.norm_shift,
            ),
            None => dr,
        };
        let dx = conv3x3_backward(
            &bt.padded_input,
            &bp.conv_weight,
            &dz,
            &mut bg.conv_weight,
            &mut bg.conv_bias,
            j > 0,
        );
        if let Some(dx) = dx {
            d_fplus = dx;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelParams;
    use crate::rng::{stream, Stream};

    fn small_cfg() -> ModelConfig {
        ModelConfig {
            image_size: (16, 16),
            channels: [4, 8, 8],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_embedding() {
        let cfg = small_cfg();
        let mut rng = stream(1, Stream::Init, &[]);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let image = vec![0.0f32; 6 * 16 * 16];
        let trace = extractor_forward(&params.extractor, &cfg, &image).unwrap();
        assert!(trace.embedding.iter().all(|&v| v == 0.0));
        assert_eq!(trace.embedding.len(), 8);
    }

    #[test]
    fn rejects_wrong_image_size() {
        let cfg = small_cfg();
        let mut rng = stream(1, Stream::Init, &[]);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        assert!(extractor_forward(&params.extractor, &cfg, &[0.0; 10]).is_err());
    }

    #[test]
    fn non_finite_input_names_block() {
        let cfg = small_cfg();
        let mut rng = stream(1, Stream::Init, &[]);
        let params = ModelParams::init(&cfg, &mut rng).unwrap();
        let mut image = vec![0.1f32; 6 * 16 * 16];
        image[5] = f32::NAN;
        assert!(matches!(
            extractor_forward(&params.extractor, &cfg, &image),
            Err(Error::NonFiniteActivation { block: 1 })
        ));
    }
}
