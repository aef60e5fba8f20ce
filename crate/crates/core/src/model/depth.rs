use crate::error::{Error, Result};
use crate::rng::StreamRng;
use crate::tensor::{FeatureMap, Tensor};

use super::ops::{conv3x3, conv3x3_backward, pad1, relu_backward_inplace, relu_inplace, Resize};
use super::{normal_tensor, ModelConfig};

/// Depth head on block-2 `F+`: 3×3 conv → ReLU → 1×1 conv → bilinear resize.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthParams {
    /// `[hidden, C_2, 3, 3]`
    pub conv1_weight: Tensor,
    pub conv1_bias: Tensor,
    /// `[hidden]`, the 1×1 projection to a single map.
    pub conv2_weight: Tensor,
    pub conv2_bias: Tensor,
}

impl DepthParams {
    pub fn init(cfg: &ModelConfig, rng: &mut StreamRng) -> Self {
        let c = cfg.channels[1];
        let hdn = cfg.depth_hidden;
        DepthParams {
            conv1_weight: normal_tensor(&[hdn, c, 3, 3], (2.0 / (9 * c) as f64).sqrt(), rng),
            conv1_bias: Tensor::zeros(&[hdn]),
            conv2_weight: normal_tensor(&[hdn], (1.0 / hdn as f64).sqrt(), rng),
            conv2_bias: Tensor::zeros(&[1]),
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Self {
        let hdn = cfg.depth_hidden;
        DepthParams {
            conv1_weight: Tensor::zeros(&[hdn, cfg.channels[1], 3, 3]),
            conv1_bias: Tensor::zeros(&[hdn]),
            conv2_weight: Tensor::zeros(&[hdn]),
            conv2_bias: Tensor::zeros(&[1]),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DepthCache {
    padded: FeatureMap,
    pre_relu: FeatureMap,
    hidden: FeatureMap,
    resize: Resize,
}

/// Predicted depth map (`depth_size`, row-major) for one sample.
pub fn depth_forward(
    params: &DepthParams,
    cfg: &ModelConfig,
    f_plus: &FeatureMap,
) -> Result<(Vec<f64>, DepthCache)> {
    if f_plus.channels != params.conv1_weight.shape[1] {
        return Err(Error::shape(
            "depth_forward",
            params.conv1_weight.shape[1],
            f_plus.channels,
        ));
    }
    let padded = pad1(f_plus);
    let pre_relu = conv3x3(&padded, &params.conv1_weight, &params.conv1_bias);
    let mut hidden = pre_relu.clone();
    relu_inplace(&mut hidden);
    let n = hidden.plane_len();
    let mut map = vec![params.conv2_bias.data[0]; n];
    for (k, &w) in params.conv2_weight.data.iter().enumerate() {
        for (m, h) in map.iter_mut().zip(hidden.channel(k)) {
            *m += w * h;
        }
    }
    let resize = Resize::new((f_plus.height, f_plus.width), cfg.depth_size);
    let out = resize.apply(&map);
    Ok((
        out,
        DepthCache {
            padded,
            pre_relu,
            hidden,
            resize,
        },
    ))
}

/// Accumulates parameter gradients; returns the gradient on `F+`.
pub fn depth_backward(
    params: &DepthParams,
    cache: &DepthCache,
    dout: &[f64],
    grads: &mut DepthParams,
) -> FeatureMap {
    let dmap = cache.resize.backward(dout);
    grads.conv2_bias.data[0] += dmap.iter().sum::<f64>();
    let hid = &cache.hidden;
    let mut dh = FeatureMap::zeros(hid.channels, hid.height, hid.width);
    for k in 0..hid.channels {
        let w = params.conv2_weight.data[k];
        grads.conv2_weight.data[k] += hid.channel(k).iter().zip(&dmap).map(|(a, b)| a * b).sum::<f64>();
        for (d, g) in dh.channel_mut(k).iter_mut().zip(&dmap) {
            *d = w * g;
        }
    }
    relu_backward_inplace(&cache.pre_relu, &mut dh);
    conv3x3_backward(
        &cache.padded,
        &params.conv1_weight,
        &dh,
        &mut grads.conv1_weight,
        &mut grads.conv1_bias,
        true,
    )
    .expect("input gradient requested")
}
