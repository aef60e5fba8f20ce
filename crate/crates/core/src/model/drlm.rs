use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::StreamRng;
use crate::tensor::{FeatureMap, Tensor};

use super::normal_tensor;

/// Channel gate of one Domain Representation Learning Module plus its
/// entropy-head weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DrlmParams {
    /// `[C/τ, C]`
    pub w1: Tensor,
    /// `[C, C/τ]`
    pub w2: Tensor,
    /// `[C]`, reads `gap(F−)` for the domain enhancement entropy loss.
    pub wp: Tensor,
}

impl DrlmParams {
    pub fn init(channels: usize, reduction: usize, rng: &mut StreamRng) -> Self {
        let r = channels / reduction;
        DrlmParams {
            w1: normal_tensor(&[r, channels], (2.0 / channels as f64).sqrt(), rng),
            w2: normal_tensor(&[channels, r], (1.0 / r as f64).sqrt(), rng),
            wp: normal_tensor(&[channels], (1.0 / channels as f64).sqrt(), rng),
        }
    }

    pub fn zeros(channels: usize, reduction: usize) -> Self {
        let r = channels / reduction;
        DrlmParams {
            w1: Tensor::zeros(&[r, channels]),
            w2: Tensor::zeros(&[channels, r]),
            wp: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.w1.shape[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DrlmOutput {
    /// Channel attention `a ∈ (0,1)^C`.
    pub attention: Vec<f64>,
    pub f_plus: FeatureMap,
    pub f_minus: FeatureMap,
    pub pooled: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
}

/// `a = sigmoid(W2 relu(W1 gap(F)))`, `F+ = a⊙F`, `F− = (1−a)⊙F`.
pub fn drlm_forward(f: &FeatureMap, params: &DrlmParams) -> Result<DrlmOutput> {
    let c = params.channels();
    if f.channels != c {
        return Err(Error::shape("drlm_forward", c, f.channels));
    }
    let r = params.w1.shape[0];
    let pooled = f.gap();
    let hidden_pre: Vec<f64> = (0..r)
        .map(|k| {
            params.w1.data[k * c..(k + 1) * c]
                .iter()
                .zip(&pooled)
                .map(|(w, g)| w * g)
                .sum()
        })
        .collect();
    let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
    let attention: Vec<f64> = (0..c)
        .map(|ch| {
            let v: f64 = params.w2.data[ch * r..(ch + 1) * r]
                .iter()
                .zip(&hidden)
                .map(|(w, u)| w * u)
                .sum();
            v.sigmoid()
        })
        .collect();
    let mut f_plus = f.clone();
    let mut f_minus = f.clone();
    for ch in 0..c {
        let a = attention[ch];
        f_plus.channel_mut(ch).iter_mut().for_each(|v| *v *= a);
        f_minus.channel_mut(ch).iter_mut().for_each(|v| *v *= 1.0 - a);
    }
    Ok(DrlmOutput {
        attention,
        f_plus,
        f_minus,
        pooled,
        hidden_pre,
        hidden,
    })
}

/// Backward through the gate.
///
/// `d_plus` is the gradient on `F+`; `d_minus_pooled` is the gradient on
/// `gap(F−)` (the only way the losses read `F−`). Returns the gradient on `F`.
pub fn drlm_backward(
    f: &FeatureMap,
    params: &DrlmParams,
    out: &DrlmOutput,
    d_plus: &FeatureMap,
    d_minus_pooled: Option<&[f64]>,
    grads: &mut DrlmParams,
) -> FeatureMap {
    let c = params.channels();
    let r = params.w1.shape[0];
    let n = f.plane_len() as f64;
    let mut df = FeatureMap::zeros(f.channels, f.height, f.width);
    let mut dv = vec![0.0; c];
    for ch in 0..c {
        let a = out.attention[ch];
        let fc = f.channel(ch);
        let gp = d_plus.channel(ch);
        let s_plus: f64 = gp.iter().zip(fc).map(|(g, x)| g * x).sum();
        let dq = d_minus_pooled.map_or(0.0, |d| d[ch]);
        // F− enters only through its channel mean: d gap(F−)/dF = (1−a)/n.
        let da = s_plus - dq * out.pooled[ch];
        dv[ch] = da * a * (1.0 - a);
        let uniform = (1.0 - a) * dq / n;
        for (d, g) in df.channel_mut(ch).iter_mut().zip(gp) {
            *d = a * g + uniform;
        }
    }
    let mut du = vec![0.0; r];
    for ch in 0..c {
        for k in 0..r {
            grads.w2.data[ch * r + k] += dv[ch] * out.hidden[k];
            du[k] += params.w2.data[ch * r + k] * dv[ch];
        }
    }
    let mut dpool = vec![0.0; c];
    for k in 0..r {
        if out.hidden_pre[k] <= 0.0 {
            continue;
        }
        for ch in 0..c {
            grads.w1.data[k * c + ch] += du[k] * out.pooled[ch];
            dpool[ch] += params.w1.data[k * c + ch] * du[k];
        }
    }
    for ch in 0..c {
        let add = dpool[ch] / n;
        df.channel_mut(ch).iter_mut().for_each(|d| *d += add);
    }
    df
}
