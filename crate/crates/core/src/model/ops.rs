//! Per-sample layer primitives and their backward passes.
//!
//! Everything operates on a single channel-planar [`FeatureMap`]; batching is
//! a loop in the caller.

use crate::tensor::{FeatureMap, Tensor};

/// Zero-pads every channel by one pixel on each side.
pub fn pad1(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height, x.width);
    let (ph, pw) = (h + 2, w + 2);
    let mut out = FeatureMap::zeros(x.channels, ph, pw);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            dst[(y + 1) * pw + 1..(y + 1) * pw + 1 + w].copy_from_slice(&src[y * w..(y + 1) * w]);
        }
    }
    out
}

/// 3×3 convolution, stride 1, on an already padded input.
/// `weight` is `[out, in, 3, 3]`, `bias` is `[out]`.
pub fn conv3x3(padded: &FeatureMap, weight: &Tensor, bias: &Tensor) -> FeatureMap {
    let c_out = weight.shape[0];
    let c_in = weight.shape[1];
    debug_assert_eq!(c_in, padded.channels);
    let (h, w) = (padded.height - 2, padded.width - 2);
    let pw = padded.width;
    let mut out = FeatureMap::zeros(c_out, h, w);
    for o in 0..c_out {
        let dst = out.channel_mut(o);
        dst.iter_mut().for_each(|v| *v = bias.data[o]);
        for i in 0..c_in {
            let src = padded.channel(i);
            let kbase = (o * c_in + i) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let k = weight.data[kbase + ky * 3 + kx];
                    if k == 0.0 {
                        continue;
                    }
                    for y in 0..h {
                        let srow = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                        let drow = &mut dst[y * w..(y + 1) * w];
                        for (d, s) in drow.iter_mut().zip(srow) {
                            *d += k * s;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward of [`conv3x3`]. Accumulates weight/bias gradients and, when
/// requested, returns the gradient w.r.t. the *unpadded* input.
pub fn conv3x3_backward(
    padded: &FeatureMap,
    weight: &Tensor,
    dout: &FeatureMap,
    dweight: &mut Tensor,
    dbias: &mut Tensor,
    need_input_grad: bool,
) -> Option<FeatureMap> {
    let c_out = weight.shape[0];
    let c_in = weight.shape[1];
    let (h, w) = (dout.height, dout.width);
    let pw = padded.width;
    let mut dpad = need_input_grad.then(|| FeatureMap::zeros(c_in, h + 2, w + 2));
    for o in 0..c_out {
        let g = dout.channel(o);
        dbias.data[o] += g.iter().sum::<f64>();
        for i in 0..c_in {
            let src = padded.channel(i);
            let kbase = (o * c_in + i) * 9;
            for ky in 0..3 {
                for kx in 0..3 {
                    let mut acc = 0.0;
                    for y in 0..h {
                        let srow = &src[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                        let grow = &g[y * w..(y + 1) * w];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                    }
                    dweight.data[kbase + ky * 3 + kx] += acc;
                    if let Some(dp) = dpad.as_mut() {
                        let k = weight.data[kbase + ky * 3 + kx];
                        if k == 0.0 {
                            continue;
                        }
                        let dst = dp.channel_mut(i);
                        for y in 0..h {
                            let drow = &mut dst[(y + ky) * pw + kx..(y + ky) * pw + kx + w];
                            let grow = &g[y * w..(y + 1) * w];
                            for (d, s) in drow.iter_mut().zip(grow) {
                                *d += k * s;
                            }
                        }
                    }
                }
            }
        }
    }
    dpad.map(|dp| {
        let mut dx = FeatureMap::zeros(c_in, h, w);
        for c in 0..c_in {
            let src = dp.channel(c);
            let dst = dx.channel_mut(c);
            for y in 0..h {
                dst[y * w..(y + 1) * w].copy_from_slice(&src[(y + 1) * pw + 1..(y + 1) * pw + 1 + w]);
            }
        }
        dx
    })
}

/// Cached quantities of one instance-norm application.
#[derive(Debug, Clone)]
pub struct NormCache {
    pub normalized: FeatureMap,
    pub std: Vec<f64>,
}

/// `γ (x − μ) / sqrt(var + ε) + η` per channel, population variance.
pub fn instance_norm(
    x: &FeatureMap,
    gamma: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> (FeatureMap, NormCache) {
    let n = x.plane_len() as f64;
    let mut normalized = x.clone();
    let mut out = x.clone();
    let mut stds = Vec::with_capacity(x.channels);
    for c in 0..x.channels {
        let src = x.channel(c);
        let mean = src.iter().sum::<f64>() / n;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = (var + eps).sqrt();
        stds.push(std);
        let xn = normalized.channel_mut(c);
        for v in xn.iter_mut() {
            *v = (*v - mean) / std;
        }
        let (g, b) = (gamma.data[c], shift.data[c]);
        for (o, v) in out.channel_mut(c).iter_mut().zip(normalized.channel(c)) {
            *o = g * v + b;
        }
    }
    (out, NormCache { normalized, std: stds })
}

pub fn instance_norm_backward(
    cache: &NormCache,
    gamma: &Tensor,
    dout: &FeatureMap,
    dgamma: &mut Tensor,
    dshift: &mut Tensor,
) -> FeatureMap {
    let n = dout.plane_len() as f64;
    let mut dx = FeatureMap::zeros(dout.channels, dout.height, dout.width);
    for c in 0..dout.channels {
        let g = dout.channel(c);
        let xh = cache.normalized.channel(c);
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        dgamma.data[c] += sum_gx;
        dshift.data[c] += sum_g;
        let gm = gamma.data[c];
        let mean_dxh = gm * sum_g / n;
        let mean_dxh_xh = gm * sum_gx / n;
        let inv = 1.0 / cache.std[c];
        for ((d, gi), xi) in dx.channel_mut(c).iter_mut().zip(g).zip(xh) {
            *d = (gm * gi - mean_dxh - xi * mean_dxh_xh) * inv;
        }
    }
    dx
}

pub fn relu_inplace(x: &mut FeatureMap) {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `grad` where the forward pre-activation was non-positive.
pub fn relu_backward_inplace(pre: &FeatureMap, grad: &mut FeatureMap) {
    for (g, p) in grad.data.iter_mut().zip(&pre.data) {
        if *p <= 0.0 {
            *g = 0.0;
        }
    }
}

pub fn avg_pool2(x: &FeatureMap) -> FeatureMap {
    let (h, w) = (x.height / 2, x.width / 2);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for xx in 0..w {
                let a = src[2 * y * x.width + 2 * xx];
                let b = src[2 * y * x.width + 2 * xx + 1];
                let c2 = src[(2 * y + 1) * x.width + 2 * xx];
                let d = src[(2 * y + 1) * x.width + 2 * xx + 1];
                dst[y * w + xx] = 0.25 * (a + b + c2 + d);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dout: &FeatureMap) -> FeatureMap {
    let (h, w) = (dout.height * 2, dout.width * 2);
    let mut dx = FeatureMap::zeros(dout.channels, h, w);
    for c in 0..dout.channels {
        let g = dout.channel(c);
        let dst = dx.channel_mut(c);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = 0.25 * g[(y / 2) * dout.width + xx / 2];
            }
        }
    }
    dx
}

/// Bilinear resampling as an explicit sparse linear map
/// (half-pixel centres, edge clamped).
#[derive(Debug, Clone, PartialEq)]
pub struct Resize {
    pub from: (usize, usize),
    pub to: (usize, usize),
    /// For each output pixel: up to four `(input index, weight)` taps.
    taps: Vec<Vec<(usize, f64)>>,
}

impl Resize {
    pub fn new(from: (usize, usize), to: (usize, usize)) -> Self {
        let axis = |n_in: usize, n_out: usize, i: usize| -> [(usize, f64); 2] {
            if n_in == n_out {
                return [(i, 1.0), (i, 0.0)];
            }
            let src = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                .clamp(0.0, (n_in - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(n_in - 1);
            let t = src - lo as f64;
            [(lo, 1.0 - t), (hi, t)]
        };
        let mut taps = Vec::with_capacity(to.0 * to.1);
        for y in 0..to.0 {
            let ty = axis(from.0, to.0, y);
            for x in 0..to.1 {
                let tx = axis(from.1, to.1, x);
                let mut t: Vec<(usize, f64)> = Vec::with_capacity(4);
                for &(iy, wy) in &ty {
                    for &(ix, wx) in &tx {
                        let wgt = wy * wx;
                        if wgt == 0.0 {
                            continue;
                        }
                        let idx = iy * from.1 + ix;
                        match t.iter_mut().find(|(j, _)| *j == idx) {
                            Some(e) => e.1 += wgt,
                            None => t.push((idx, wgt)),
                        }
                    }
                }
                taps.push(t);
            }
        }
        Resize { from, to, taps }
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        self.taps
            .iter()
            .map(|t| t.iter().map(|&(i, w)| w * input[i]).sum())
            .collect()
    }

    pub fn backward(&self, dout: &[f64]) -> Vec<f64> {
        let mut din = vec![0.0; self.from.0 * self.from.1];
        for (t, g) in self.taps.iter().zip(dout) {
            for &(i, w) in t {
                din[i] += w * g;
            }
        }
        din
    }
}
